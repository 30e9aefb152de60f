// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "chunk_dag.hpp"
#include "core.hpp"

namespace cclforge {

class program_builder;

/// Versioned handle to a span of buffer slots on one rank; the only way programs touch data.
/// A reference goes stale as soon as any referenced slot is overwritten.
class chunk_ref {
  public:
	int rank() const { return span_.rank; }
	buffer buf() const { return span_.buf; }
	int index() const { return span_.index; }
	int count() const { return span_.count; }
	const span& get_span() const { return span_; }

	chunk_ref copy(int dst_rank, buffer dst_buf, int dst_index, const directives& dirs = {}) const;
	chunk_ref reduce(const chunk_ref& src, const directives& dirs = {}) const;

  private:
	friend class program_builder;
	chunk_ref(program_builder* builder, const span& sp, std::vector<uint64_t> versions) : builder_(builder), span_(sp), versions_(std::move(versions)) {}

	program_builder* builder_;
	span span_;
	std::vector<uint64_t> versions_; // one per referenced slot, captured at creation
};

/// Fluent tracing frontend. Operations execute immediately against a symbolic machine state
/// (so stale references, uninitialized reads and double reductions are caught at the call
/// site) and are recorded for `finalize()`, which expands parallelized fragments, refines the
/// chunk granularity and emits the chunk DAG.
class program_builder {
  public:
	explicit program_builder(collective_spec spec, std::string name = "program") : name_(std::move(name)), spec_(std::move(spec)) {
		spec_.check();
		state_.assign(spec_.ranks, {});
		for(int r = 0; r < spec_.ranks; ++r) {
			auto& rs = state_[r];
			rs.input.resize(spec_.input_chunks_per_rank);
			for(int i = 0; i < spec_.input_chunks_per_rank; ++i) {
				rs.input[i].value = chunk_value::input(r, i);
			}
			if(!spec_.in_place) rs.output.resize(spec_.output_chunks_per_rank);
		}
	}

	program_builder(const program_builder&) = delete;
	program_builder& operator=(const program_builder&) = delete;

	const collective_spec& spec() const { return spec_; }

	/// Returns a reference to `count` contiguous chunks currently in the buffer.
	chunk_ref chunk(const int rank, const buffer buf, const int index, const int count = 1) {
		require_active();
		if(count < 1) fail(errc::invalid_argument, "chunk count must be >= 1");
		const span sp{rank, buf, index, count};
		check_rank(rank);
		grow_scratch(sp); // scratch extends to the highest index accessed
		check_extent(sp);
		std::vector<uint64_t> versions(count);
		for(int i = 0; i < count; ++i) {
			const auto& s = slot(rank, buf, index + i);
			if(s.value.is_uninitialized()) fail(errc::uninitialized_read, "chunk reference to uninitialized slot " + to_string(span{rank, buf, index + i, 1}));
			versions[i] = s.version;
		}
		return chunk_ref(this, sp, std::move(versions));
	}

	/// Copies the chunks referenced by `src` to the destination indices and returns a fresh
	/// reference for them. An exact self-copy is a no-op.
	chunk_ref copy(const chunk_ref& src, const int dst_rank, const buffer dst_buf, const int dst_index, const directives& dirs = {}) {
		require_active();
		require_current(src);
		check_rank(dst_rank);
		const span dst{dst_rank, dst_buf, dst_index, src.count()};
		if(dst_index < 0) fail(errc::out_of_range, "negative destination index");
		if(aliases(src.get_span(), dst)) {
			if(src.get_span().index == dst.index && storage_of(src.get_span()) == storage_of(dst)) {
				return chunk_ref(this, dst, src.versions_); // exact self-copy
			}
			fail(errc::overlap, "copy source " + to_string(src.get_span()) + " partially overlaps destination " + to_string(dst));
		}
		grow_scratch(dst);
		check_extent(dst);
		for(int i = 0; i < dst.count; ++i) {
			write_slot(dst.rank, dst.buf, dst.index + i, slot(src.rank(), src.buf(), src.index() + i).value);
		}
		record(chunk_op_kind::copy, src.get_span(), dst, dirs);
		return current_ref(dst);
	}

	/// Reduces `src` into the indices of `dst` (point-wise, in place) and returns a fresh
	/// reference to the result. Data flows src -> dst: for remote operands the source rank
	/// sends and the destination rank receives and reduces.
	chunk_ref reduce(const chunk_ref& dst, const chunk_ref& src, const directives& dirs = {}) {
		require_active();
		require_current(dst);
		require_current(src);
		if(dst.count() != src.count()) {
			fail(errc::count_mismatch, "reduce of " + std::to_string(dst.count()) + " chunks with " + std::to_string(src.count()));
		}
		std::vector<chunk_value> result(dst.count());
		for(int i = 0; i < dst.count(); ++i) {
			result[i] = reduce_values(slot(dst.rank(), dst.buf(), dst.index() + i).value, slot(src.rank(), src.buf(), src.index() + i).value);
		}
		for(int i = 0; i < dst.count(); ++i) {
			write_slot(dst.rank(), dst.buf(), dst.index() + i, std::move(result[i]));
		}
		record(chunk_op_kind::reduce, src.get_span(), dst.get_span(), dirs);
		return current_ref(dst.get_span());
	}

	/// Replicates the operations issued by `fragment` into `factor` parallel instances, each
	/// operating on 1/factor-th of the data on non-intersecting channels. Realized at
	/// finalize() by refining the chunk granularity, so the recorded trace stays integral.
	void parallelize(const int factor, const std::function<void()>& fragment) {
		require_active();
		if(factor < 1) fail(errc::invalid_argument, "parallelize factor must be >= 1");
		const int scope_id = static_cast<int>(scope_factors_.size());
		scope_factors_.push_back(factor);
		scope_stack_.push_back(scope_id);
		fragment();
		scope_stack_.pop_back();
	}

	/// Emits the chunk DAG. The builder cannot be used afterwards.
	chunk_dag finalize() {
		require_active();
		finalized_ = true;

		// Refinement factor: every op inside parallelize scopes is subdivided by the product
		// of its scope factors; the LCM over all ops keeps every subdivision integral.
		int refine = 1;
		for(const auto& op : trace_) {
			refine = std::lcm(refine, instance_count(op));
		}

		chunk_dag dag;
		dag.name = name_;
		dag.spec = spec_.scaled(refine);
		expand(dag, refine);
		return dag;
	}

  private:
	friend class chunk_ref;

	struct slot_state {
		chunk_value value;
		uint64_t version = 0;
	};
	struct rank_state {
		std::vector<slot_state> input; // aliases output when in place
		std::vector<slot_state> output;
		std::vector<slot_state> scratch;
	};
	struct trace_op {
		chunk_op_kind kind;
		span src, dst;
		directives dirs;
		std::vector<int> scopes; // active parallelize scopes, outermost first
	};

	std::string name_;
	collective_spec spec_;
	std::vector<rank_state> state_;
	std::vector<trace_op> trace_;
	std::vector<int> scope_factors_;
	std::vector<int> scope_stack_;
	bool finalized_ = false;

	void require_active() const {
		if(finalized_) fail(errc::invalid_argument, "program builder already finalized");
	}

	void check_rank(const int rank) const {
		if(rank < 0 || rank >= spec_.ranks) fail(errc::out_of_range, "rank " + std::to_string(rank) + " out of range");
	}

	buffer storage_of(const span& sp) const { return storage_buffer(spec_, sp.buf); }

	bool aliases(const span& a, const span& b) const { return spans_alias(spec_, a, b); }

	std::vector<slot_state>& slots(const int rank, const buffer buf) {
		switch(storage_buffer(spec_, buf)) {
		case buffer::input: return state_[rank].input;
		case buffer::output: return state_[rank].output;
		case buffer::scratch: return state_[rank].scratch;
		}
		fail(errc::invalid_argument, "bad buffer");
	}

	slot_state& slot(const int rank, const buffer buf, const int index) { return slots(rank, buf)[index]; }

	/// Scratch extends up to the highest index accessed; input/output are fixed.
	void grow_scratch(const span& sp) {
		if(storage_of(sp) != buffer::scratch) return;
		auto& sc = state_[sp.rank].scratch;
		if(static_cast<int>(sc.size()) < sp.end()) sc.resize(sp.end());
	}

	void check_extent(const span& sp) {
		if(sp.index < 0) fail(errc::out_of_range, "negative index in " + to_string(sp));
		if(sp.end() > static_cast<int>(slots(sp.rank, sp.buf).size())) { fail(errc::out_of_range, to_string(sp) + " exceeds buffer extent"); }
	}

	void require_current(const chunk_ref& ref) {
		if(ref.builder_ != this) fail(errc::invalid_argument, "chunk reference belongs to a different program");
		for(int i = 0; i < ref.count(); ++i) {
			if(slot(ref.rank(), ref.buf(), ref.index() + i).version != ref.versions_[i]) {
				fail(errc::stale_reference, "stale reference to " + to_string(span{ref.rank(), ref.buf(), ref.index() + i, 1}));
			}
		}
	}

	void write_slot(const int rank, const buffer buf, const int index, chunk_value value) {
		auto& s = slot(rank, buf, index);
		s.value = std::move(value);
		s.version++;
	}

	chunk_ref current_ref(const span& sp) {
		std::vector<uint64_t> versions(sp.count);
		for(int i = 0; i < sp.count; ++i) {
			versions[i] = slot(sp.rank, sp.buf, sp.index + i).version;
		}
		return chunk_ref(this, sp, std::move(versions));
	}

	void record(const chunk_op_kind kind, const span& src, const span& dst, const directives& dirs) {
		trace_.push_back(trace_op{kind, src, dst, dirs, scope_stack_});
	}

	int instance_count(const trace_op& op) const {
		int p = 1;
		for(const int scope : op.scopes) {
			p *= scope_factors_[scope];
		}
		return p;
	}

	/// Channel stride between parallel instances of a scope: one past the highest channel
	/// directive used anywhere under the scope's outermost ancestor, or 1 when the fragment
	/// uses no channel directives.
	int channel_stride(const int outermost_scope) const {
		int max_ch = 0;
		for(const auto& op : trace_) {
			if(!op.scopes.empty() && op.scopes.front() == outermost_scope && op.dirs.ch.has_value()) { max_ch = std::max(max_ch, *op.dirs.ch); }
		}
		return max_ch + 1;
	}

	// -- finalize expansion ---------------------------------------------------------------

	struct dag_builder {
		const collective_spec& spec;
		chunk_dag& dag;
		std::vector<std::vector<slot_state>> input, output, scratch; // fine-granularity values (reused slot_state, version unused)
		std::vector<std::vector<int>> last_writer_in, last_writer_out, last_writer_sc;
		std::vector<std::map<int, std::set<int>>> readers_in, readers_out, readers_sc; // [rank] index -> reader node ids
		std::map<std::pair<int, int>, bool> edges;                                     // (from, to) -> is_true_dep

		dag_builder(const collective_spec& s, chunk_dag& d) : spec(s), dag(d) {
			input.assign(s.ranks, {});
			output.assign(s.ranks, {});
			scratch.assign(s.ranks, {});
			last_writer_in.assign(s.ranks, {});
			last_writer_out.assign(s.ranks, {});
			last_writer_sc.assign(s.ranks, {});
			readers_in.assign(s.ranks, {});
			readers_out.assign(s.ranks, {});
			readers_sc.assign(s.ranks, {});
			for(int r = 0; r < s.ranks; ++r) {
				input[r].resize(s.input_chunks_per_rank);
				last_writer_in[r].assign(s.input_chunks_per_rank, -1);
				if(!s.in_place) {
					output[r].resize(s.output_chunks_per_rank);
					last_writer_out[r].assign(s.output_chunks_per_rank, -1);
				}
			}
		}

		std::vector<slot_state>& values(const int rank, const buffer buf) {
			switch(storage_buffer(spec, buf)) {
			case buffer::input: return input[rank];
			case buffer::output: return output[rank];
			case buffer::scratch: return scratch[rank];
			}
			fail(errc::invalid_argument, "bad buffer");
		}
		std::vector<int>& writers(const int rank, const buffer buf) {
			switch(storage_buffer(spec, buf)) {
			case buffer::input: return last_writer_in[rank];
			case buffer::output: return last_writer_out[rank];
			case buffer::scratch: return last_writer_sc[rank];
			}
			fail(errc::invalid_argument, "bad buffer");
		}
		std::map<int, std::set<int>>& readers(const int rank, const buffer buf) {
			switch(storage_buffer(spec, buf)) {
			case buffer::input: return readers_in[rank];
			case buffer::output: return readers_out[rank];
			case buffer::scratch: return readers_sc[rank];
			}
			fail(errc::invalid_argument, "bad buffer");
		}

		void add_edge(const int from, const int to, const bool true_dep) {
			if(from < 0 || from == to) return;
			auto [it, inserted] = edges.emplace(std::pair{from, to}, true_dep);
			if(!inserted) it->second = it->second || true_dep; // a true dependency subsumes a false one
		}

		void grow(const span& sp) {
			if(storage_buffer(spec, sp.buf) != buffer::scratch) return;
			auto& v = scratch[sp.rank];
			if(static_cast<int>(v.size()) < sp.end()) {
				v.resize(sp.end());
				last_writer_sc[sp.rank].resize(sp.end(), -1);
			}
		}

		void read_span(const int node, const span& sp) {
			auto& w = writers(sp.rank, sp.buf);
			auto& rd = readers(sp.rank, sp.buf);
			for(int i = sp.index; i < sp.end(); ++i) {
				add_edge(w[i], node, true);
				rd[i].insert(node);
			}
		}

		void write_span(const int node, const span& sp, const std::vector<chunk_value>& new_values) {
			auto& v = values(sp.rank, sp.buf);
			auto& w = writers(sp.rank, sp.buf);
			auto& rd = readers(sp.rank, sp.buf);
			for(int i = sp.index; i < sp.end(); ++i) {
				add_edge(w[i], node, false); // write-after-write
				if(const auto it = rd.find(i); it != rd.end()) {
					for(const int reader : it->second) {
						add_edge(reader, node, false); // write-after-read
					}
					rd.erase(it);
				}
				v[i].value = new_values[i - sp.index];
				w[i] = node;
			}
		}
	};

	void expand(chunk_dag& dag, const int refine) {
		dag_builder b(dag.spec, dag);

		// one source node per initialized input slot
		for(int r = 0; r < dag.spec.ranks; ++r) {
			for(int i = 0; i < dag.spec.input_chunks_per_rank; ++i) {
				const int id = static_cast<int>(dag.nodes.size());
				const span sp{r, buffer::input, i, 1};
				dag.nodes.push_back(chunk_op_node{id, chunk_op_kind::source, sp, sp, {}, 0, id});
				b.values(r, buffer::input)[i].value = chunk_value::input(r, i);
				b.writers(r, buffer::input)[i] = id;
			}
		}
		dag.source_count = static_cast<int>(dag.nodes.size());

		std::set<std::pair<int, int>> flagged_channel_offsets;
		for(const auto& op : trace_) {
			const int instances = instance_count(op);
			const int stride = op.scopes.empty() ? 0 : channel_stride(op.scopes.front());
			const int sub_count = op.src.count * refine / instances;
			for(int k = 0; k < instances; ++k) {
				const int offset = k * stride;
				span src{op.src.rank, op.src.buf, op.src.index * refine + k * sub_count, sub_count};
				span dst{op.dst.rank, op.dst.buf, op.dst.index * refine + k * sub_count, sub_count};
				directives dirs = op.dirs;
				if(dirs.ch.has_value() && offset > 0) {
					dirs.ch = *dirs.ch + offset;
					if(flagged_channel_offsets.emplace(*op.dirs.ch, offset).second) {
						dag.notes.push_back(
						    "parallelize: channel directive " + std::to_string(*op.dirs.ch) + " offset to " + std::to_string(*dirs.ch) + " for instance " + std::to_string(k));
					}
				}

				const int id = static_cast<int>(dag.nodes.size());
				dag.nodes.push_back(chunk_op_node{id, op.kind, src, dst, dirs, op.dirs.ch.has_value() ? 0 : offset, id});

				b.grow(src);
				b.grow(dst);
				std::vector<chunk_value> result(sub_count);
				if(op.kind == chunk_op_kind::copy) {
					for(int i = 0; i < sub_count; ++i) {
						result[i] = b.values(src.rank, src.buf)[src.index + i].value;
					}
					b.read_span(id, src);
				} else {
					for(int i = 0; i < sub_count; ++i) {
						result[i] = reduce_values(b.values(dst.rank, dst.buf)[dst.index + i].value, b.values(src.rank, src.buf)[src.index + i].value);
					}
					b.read_span(id, src);
					b.read_span(id, dst);
				}
				b.write_span(id, dst, result);
			}
		}

		for(const auto& [edge, true_dep] : b.edges) {
			(true_dep ? dag.true_edges : dag.false_edges).push_back(edge);
		}
		dag.scratch_chunks.assign(dag.spec.ranks, 0);
		for(int r = 0; r < dag.spec.ranks; ++r) {
			dag.scratch_chunks[r] = static_cast<int>(b.scratch[r].size());
		}
		check_tb_hints();
	}

	/// Manual thread block assignment is all-or-nothing: once any operation carries a
	/// sendtb/recvtb hint, every remote operation must.
	void check_tb_hints() const {
		bool any_hint = false;
		for(const auto& op : trace_) {
			any_hint = any_hint || op.dirs.sendtb.has_value() || op.dirs.recvtb.has_value();
		}
		if(!any_hint) return;
		for(const auto& op : trace_) {
			if(op.src.rank != op.dst.rank && (!op.dirs.sendtb.has_value() || !op.dirs.recvtb.has_value())) {
				fail(errc::hint_conflict, "partial manual thread block assignment: remote operation " + to_string(op.src) + " -> " + to_string(op.dst)
				                              + " is missing sendtb/recvtb");
			}
		}
	}
};

inline chunk_ref chunk_ref::copy(const int dst_rank, const buffer dst_buf, const int dst_index, const directives& dirs) const {
	return builder_->copy(*this, dst_rank, dst_buf, dst_index, dirs);
}

inline chunk_ref chunk_ref::reduce(const chunk_ref& src, const directives& dirs) const { return builder_->reduce(*this, src, dirs); }

} // namespace cclforge
