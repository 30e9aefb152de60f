// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "core.hpp"

namespace cclforge {

/// Scheduling directives attached to a copy/reduce operation. `ch` pins the communication
/// edge to a channel; `sendtb`/`recvtb` pin the generated instructions to thread block ids on
/// the source and destination rank respectively.
struct directives {
	std::optional<int> ch;
	std::optional<int> sendtb;
	std::optional<int> recvtb;

	bool operator==(const directives&) const = default;
};

enum class chunk_op_kind { source, copy, reduce };

inline const char* to_string(const chunk_op_kind k) {
	switch(k) {
	case chunk_op_kind::source: return "source";
	case chunk_op_kind::copy: return "copy";
	case chunk_op_kind::reduce: return "reduce";
	}
	return "?";
}

struct chunk_op_node {
	int id = 0;
	chunk_op_kind kind = chunk_op_kind::copy;
	span src; // for sources, src == dst == the initialized slot
	span dst;
	directives dirs;
	int instance_offset = 0; ///< channel offset of the parallelization instance this op belongs to
	int trace_order = 0;     ///< equals id; kept separate because later stages renumber nodes
};

/// Trace-derived dataflow graph of a program. True edges carry chunk movement, false edges
/// order slot reuse (write-after-read / write-after-write). `trace_order` over the nodes is a
/// valid topological order of both edge sets combined.
struct chunk_dag {
	std::string name;
	collective_spec spec; // at final (possibly refined) chunk granularity
	std::vector<chunk_op_node> nodes;
	std::vector<std::pair<int, int>> true_edges;
	std::vector<std::pair<int, int>> false_edges;
	std::vector<int> scratch_chunks;  // deduced per-rank scratch extent
	std::vector<std::string> notes;   // compilation diagnostics, carried into reports
	int source_count = 0;

	int max_scratch_chunks() const {
		int m = 0;
		for(const int s : scratch_chunks) {
			m = std::max(m, s);
		}
		return m;
	}
};

/// Resolves buffer aliasing: for in-place collectives the output buffer is the input buffer.
inline buffer storage_buffer(const collective_spec& spec, const buffer buf) {
	return (spec.in_place && buf == buffer::output) ? buffer::input : buf;
}

inline bool spans_alias(const collective_spec& spec, const span& a, const span& b) {
	return a.rank == b.rank && storage_buffer(spec, a.buf) == storage_buffer(spec, b.buf) && ranges_overlap(a.index, a.count, b.index, b.count);
}

/// Executes all nodes in trace order and returns the resulting machine state.
inline buffer_state replay(const chunk_dag& dag) {
	buffer_state state(dag.spec, dag.scratch_chunks);
	for(const auto& node : dag.nodes) {
		switch(node.kind) {
		case chunk_op_kind::source: break; // initial state already holds input chunks
		case chunk_op_kind::copy:
			for(int i = 0; i < node.src.count; ++i) {
				state.set(node.dst.rank, node.dst.buf, node.dst.index + i, state.at(node.src.rank, node.src.buf, node.src.index + i));
			}
			break;
		case chunk_op_kind::reduce:
			for(int i = 0; i < node.src.count; ++i) {
				state.set(node.dst.rank, node.dst.buf, node.dst.index + i,
				    reduce_values(state.at(node.dst.rank, node.dst.buf, node.dst.index + i), state.at(node.src.rank, node.src.buf, node.src.index + i)));
			}
			break;
		}
	}
	return state;
}

struct verification_entry {
	int rank = 0;
	int index = 0;
	chunk_value expected;
	chunk_value actual;
	bool constrained = false;
	bool ok = true;
};

struct verification_report {
	bool passed = true;
	std::vector<verification_entry> entries; // one per (rank, output index)
	std::vector<std::string> notes;

	std::string summary() const {
		std::ostringstream os;
		int failures = 0;
		for(const auto& e : entries) {
			if(!e.ok) ++failures;
		}
		os << (passed ? "pass" : "FAIL") << " (" << entries.size() << " output slots, " << failures << " mismatches)";
		for(const auto& e : entries) {
			if(!e.ok) { os << "\n  rank " << e.rank << " output[" << e.index << "]: expected " << e.expected.str() << ", got " << e.actual.str(); }
		}
		for(const auto& n : notes) {
			os << "\n  note: " << n;
		}
		return os.str();
	}
};

/// Compares the output buffers of `state` against the collective's postcondition.
inline verification_report check_postcondition(const buffer_state& state, const collective_spec& spec) {
	verification_report report;
	for(int r = 0; r < spec.ranks; ++r) {
		for(int i = 0; i < spec.output_chunks_per_rank; ++i) {
			verification_entry e;
			e.rank = r;
			e.index = i;
			e.expected = spec.postcondition[r][i];
			e.actual = state.at(r, buffer::output, i);
			e.constrained = !e.expected.is_uninitialized();
			e.ok = !e.constrained || e.expected == e.actual;
			report.passed = report.passed && e.ok;
			report.entries.push_back(std::move(e));
		}
	}
	return report;
}

/// Replays the program and checks its postcondition. Failures are report entries, never
/// exceptions.
inline verification_report verify(const chunk_dag& dag) {
	auto report = check_postcondition(replay(dag), dag.spec);
	report.notes = dag.notes;
	return report;
}

/// Deterministic DOT rendering: true edges solid, false edges dashed.
inline std::string emit_chunk_dot(const chunk_dag& dag) {
	std::ostringstream os;
	os << "digraph \"" << dag.name << "\" {\n";
	os << "  rankdir=TB;\n  node [shape=box, fontname=\"monospace\"];\n";
	for(const auto& n : dag.nodes) {
		os << "  n" << n.id << " [label=\"" << n.id << ": " << to_string(n.kind);
		if(n.kind == chunk_op_kind::source) {
			os << " " << to_string(n.dst);
		} else {
			os << " " << to_string(n.src) << " -> " << to_string(n.dst);
		}
		os << "\"";
		if(n.kind == chunk_op_kind::source) os << ", style=filled, fillcolor=lightgray";
		os << "];\n";
	}
	for(const auto& [from, to] : dag.true_edges) {
		os << "  n" << from << " -> n" << to << ";\n";
	}
	for(const auto& [from, to] : dag.false_edges) {
		os << "  n" << from << " -> n" << to << " [style=dashed];\n";
	}
	os << "}\n";
	return os.str();
}

} // namespace cclforge
