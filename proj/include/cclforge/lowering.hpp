// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <deque>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "chunk_dag.hpp"
#include "core.hpp"

namespace cclforge {

enum class opcode {
	send,
	recv,
	copy,
	reduce,
	recv_reduce_copy,      // rrc
	recv_copy_send,        // rcs
	recv_reduce_copy_send, // rrcs
	recv_reduce_send,      // rrs
	nop,
};

inline const char* to_string(const opcode op) {
	switch(op) {
	case opcode::send: return "send";
	case opcode::recv: return "recv";
	case opcode::copy: return "copy";
	case opcode::reduce: return "reduce";
	case opcode::recv_reduce_copy: return "rrc";
	case opcode::recv_copy_send: return "rcs";
	case opcode::recv_reduce_copy_send: return "rrcs";
	case opcode::recv_reduce_send: return "rrs";
	case opcode::nop: return "nop";
	}
	return "?";
}

inline std::optional<opcode> parse_opcode(const std::string& s) {
	for(const auto op : {opcode::send, opcode::recv, opcode::copy, opcode::reduce, opcode::recv_reduce_copy, opcode::recv_copy_send,
	        opcode::recv_reduce_copy_send, opcode::recv_reduce_send, opcode::nop}) {
		if(s == to_string(op)) return op;
	}
	return std::nullopt;
}

inline bool is_fused(const opcode op) {
	return op == opcode::recv_reduce_copy_send || op == opcode::recv_reduce_send || op == opcode::recv_copy_send;
}

inline bool receives(const opcode op) {
	return op == opcode::recv || op == opcode::recv_reduce_copy || op == opcode::recv_copy_send || op == opcode::recv_reduce_copy_send
	       || op == opcode::recv_reduce_send;
}

inline bool sends(const opcode op) {
	return op == opcode::send || op == opcode::recv_copy_send || op == opcode::recv_reduce_copy_send || op == opcode::recv_reduce_send;
}

/// One point-to-point or local instruction.
///
/// Span conventions: `src`/`dst` describe the instruction from its own rank's perspective.
///   send - src: local read span;               dst: placement on the receiving rank
///   recv - src: origin span on the sender;     dst: local write span
///   rcs  - src: local write span (forwarded);  dst: placement on the next rank
///   rrc  - src: local reduce operand;          dst: local write span
///   rrcs - src: local reduce operand + write;  dst: placement on the next rank
///   rrs  - src: local reduce operand (no local write); dst: placement on the next rank
///   copy/reduce - both spans local
struct instr_node {
	int id = 0;
	int rank = 0;
	opcode op = opcode::nop;
	span src;
	span dst;
	int count = 1;
	int send_peer = -1;
	int recv_peer = -1;
	std::optional<int> channel_directive;
	int instance_offset = 0;
	std::optional<int> sendtb;
	std::optional<int> recvtb;
	int channel = -1; ///< assigned by the scheduler
	int trace_order = 0;
};

/// The local span an instruction writes, if any.
inline std::optional<span> local_write_span(const instr_node& n) {
	switch(n.op) {
	case opcode::recv:
	case opcode::copy:
	case opcode::reduce:
	case opcode::recv_reduce_copy: return n.dst;
	case opcode::recv_copy_send:
	case opcode::recv_reduce_copy_send: return n.src;
	default: return std::nullopt;
	}
}

/// The local spans an instruction reads.
inline std::vector<span> local_read_spans(const instr_node& n) {
	switch(n.op) {
	case opcode::send:
	case opcode::copy:
	case opcode::recv_reduce_copy:
	case opcode::recv_reduce_copy_send:
	case opcode::recv_reduce_send: return {n.src};
	case opcode::reduce: return {n.src, n.dst};
	default: return {};
	}
}

/// Lowered point-to-point view of a program. Communication edges connect each send-side
/// instruction to its matching receive; processing edges order instructions within a rank.
struct instr_dag {
	std::string name;
	collective_spec spec;
	std::vector<int> scratch_chunks;
	std::vector<instr_node> nodes;
	std::vector<std::pair<int, int>> comm_edges;
	std::vector<std::pair<int, int>> proc_edges;
	std::vector<std::string> notes;
};

namespace detail {

	struct adjacency {
		std::vector<std::vector<int>> out, in;
		explicit adjacency(const size_t n) : out(n), in(n) {}
		void add(const std::vector<std::pair<int, int>>& edges) {
			for(const auto& [from, to] : edges) {
				out[from].push_back(to);
				in[to].push_back(from);
			}
		}
	};

	/// Kahn's algorithm over comm+proc edges; throws if the graph has a cycle.
	inline std::vector<int> topological_order(const instr_dag& dag) {
		adjacency adj(dag.nodes.size());
		adj.add(dag.comm_edges);
		adj.add(dag.proc_edges);
		std::vector<int> indegree(dag.nodes.size(), 0);
		for(size_t v = 0; v < dag.nodes.size(); ++v) {
			indegree[v] = static_cast<int>(adj.in[v].size());
		}
		std::deque<int> ready;
		for(size_t v = 0; v < dag.nodes.size(); ++v) {
			if(indegree[v] == 0) ready.push_back(static_cast<int>(v));
		}
		std::vector<int> order;
		order.reserve(dag.nodes.size());
		while(!ready.empty()) {
			const int v = ready.front();
			ready.pop_front();
			order.push_back(v);
			for(const int w : adj.out[v]) {
				if(--indegree[w] == 0) ready.push_back(w);
			}
		}
		if(order.size() != dag.nodes.size()) fail(errc::invalid_argument, "instruction graph contains a cycle");
		return order;
	}

} // namespace detail

/// Dependency depth per instruction: the maximum number of communication edges on any path
/// from a source, i.e. the number of hops a chunk has traversed. Processing edges are
/// followed but contribute no hops.
inline std::vector<int> comm_depths(const instr_dag& dag) {
	const auto order = detail::topological_order(dag);
	std::vector<int> depth(dag.nodes.size(), 0);
	detail::adjacency adj(dag.nodes.size());
	adj.add(dag.comm_edges);
	adj.add(dag.proc_edges);
	std::set<std::pair<int, int>> comm_set(dag.comm_edges.begin(), dag.comm_edges.end());
	for(const int v : order) {
		for(const int w : adj.out[v]) {
			const int hop = comm_set.count({v, w}) ? 1 : 0;
			depth[w] = std::max(depth[w], depth[v] + hop);
		}
	}
	return depth;
}

/// Reverse dependency depth: communication hops remaining toward any sink.
inline std::vector<int> reverse_comm_depths(const instr_dag& dag) {
	const auto order = detail::topological_order(dag);
	std::vector<int> depth(dag.nodes.size(), 0);
	detail::adjacency adj(dag.nodes.size());
	adj.add(dag.comm_edges);
	adj.add(dag.proc_edges);
	std::set<std::pair<int, int>> comm_set(dag.comm_edges.begin(), dag.comm_edges.end());
	for(auto it = order.rbegin(); it != order.rend(); ++it) {
		const int v = *it;
		for(const int w : adj.out[v]) {
			const int hop = comm_set.count({v, w}) ? 1 : 0;
			depth[v] = std::max(depth[v], depth[w] + hop);
		}
	}
	return depth;
}

/// Maximum communication depth of the program (the step count of the algorithm).
inline int comm_depth(const instr_dag& dag) {
	int m = 0;
	for(const int d : comm_depths(dag)) {
		m = std::max(m, d);
	}
	return m;
}

/// Expands chunk operations into point-to-point instructions. A local copy/reduce becomes a
/// single instruction; a remote copy becomes send+recv and a remote reduce becomes
/// send+recvReduceCopy, linked by a communication edge. Chunk DAG edges are preserved as
/// processing edges between the corresponding instruction endpoints on the shared rank.
inline instr_dag lower(const chunk_dag& dag, const bool skip_verify = false) {
	if(!skip_verify) {
		if(const auto report = verify(dag); !report.passed) { fail(errc::verification_failed, dag.name + " does not implement its collective: " + report.summary()); }
	}

	instr_dag out;
	out.name = dag.name;
	out.spec = dag.spec;
	out.scratch_chunks = dag.scratch_chunks;
	out.notes = dag.notes;

	// per chunk node: the instruction that reads its src span and the one that writes its dst
	std::vector<int> src_instr(dag.nodes.size(), -1), dst_instr(dag.nodes.size(), -1);

	for(const auto& node : dag.nodes) {
		if(node.kind == chunk_op_kind::source) continue;
		const bool remote = node.src.rank != node.dst.rank;
		const int count = node.src.count;
		if(!remote) {
			instr_node n;
			n.id = static_cast<int>(out.nodes.size());
			n.rank = node.dst.rank;
			n.op = node.kind == chunk_op_kind::copy ? opcode::copy : opcode::reduce;
			n.src = node.src;
			n.dst = node.dst;
			n.count = count;
			n.channel_directive = node.dirs.ch;
			n.instance_offset = node.instance_offset;
			n.sendtb = node.dirs.sendtb;
			n.recvtb = node.dirs.recvtb;
			n.trace_order = n.id;
			out.nodes.push_back(n);
			src_instr[node.id] = dst_instr[node.id] = n.id;
		} else {
			instr_node snd;
			snd.id = static_cast<int>(out.nodes.size());
			snd.rank = node.src.rank;
			snd.op = opcode::send;
			snd.src = node.src;
			snd.dst = node.dst;
			snd.count = count;
			snd.send_peer = node.dst.rank;
			snd.channel_directive = node.dirs.ch;
			snd.instance_offset = node.instance_offset;
			snd.sendtb = node.dirs.sendtb;
			snd.trace_order = snd.id;
			out.nodes.push_back(snd);

			instr_node rcv;
			rcv.id = static_cast<int>(out.nodes.size());
			rcv.rank = node.dst.rank;
			rcv.op = node.kind == chunk_op_kind::copy ? opcode::recv : opcode::recv_reduce_copy;
			rcv.src = node.kind == chunk_op_kind::copy ? node.src : node.dst; // rrc reduces with the destination span
			rcv.dst = node.dst;
			rcv.count = count;
			rcv.recv_peer = node.src.rank;
			rcv.channel_directive = node.dirs.ch;
			rcv.instance_offset = node.instance_offset;
			rcv.recvtb = node.dirs.recvtb;
			rcv.trace_order = rcv.id;
			out.nodes.push_back(rcv);

			out.comm_edges.emplace_back(snd.id, rcv.id);
			src_instr[node.id] = snd.id;
			dst_instr[node.id] = rcv.id;
		}
	}

	std::set<std::pair<int, int>> proc;
	const auto add_proc = [&](const int from, const int to) {
		if(from >= 0 && to >= 0 && from != to) proc.emplace(from, to);
	};
	for(const auto& [u, v] : dag.true_edges) {
		const auto& nu = dag.nodes[u];
		const auto& nv = dag.nodes[v];
		if(spans_alias(dag.spec, nu.dst, nv.src)) add_proc(dst_instr[u], src_instr[v]);
		if(nv.kind == chunk_op_kind::reduce && spans_alias(dag.spec, nu.dst, nv.dst)) add_proc(dst_instr[u], dst_instr[v]);
	}
	for(const auto& [u, v] : dag.false_edges) {
		const auto& nu = dag.nodes[u];
		const auto& nv = dag.nodes[v];
		if(spans_alias(dag.spec, nu.src, nv.dst)) add_proc(src_instr[u], dst_instr[v]);
		if(spans_alias(dag.spec, nu.dst, nv.dst)) add_proc(dst_instr[u], dst_instr[v]);
	}
	out.proc_edges.assign(proc.begin(), proc.end());
	return out;
}

namespace detail {

	struct fusion_candidate {
		int recv_node;
		int send_node;
	};

	/// Matches the fusion preconditions for `u` (a recv or rrc) with a dependent send: the
	/// send forwards exactly the span the receive produced, with equal count, on a compatible
	/// channel, instance and thread block.
	inline std::vector<int> fusable_sends(const instr_dag& dag, const adjacency& adj, const std::vector<char>& alive, const int u) {
		const auto& nu = dag.nodes[u];
		if(!alive[u] || (nu.op != opcode::recv && nu.op != opcode::recv_reduce_copy)) return {};
		const auto written = local_write_span(nu);
		std::vector<int> candidates;
		for(const int s : adj.out[u]) {
			const auto& ns = dag.nodes[s];
			if(!alive[s] || ns.op != opcode::send) continue;
			if(!(ns.src == *written) || ns.count != nu.count) continue;
			if(ns.channel_directive != nu.channel_directive) continue;
			if(ns.instance_offset != nu.instance_offset) continue;
			if(ns.sendtb != nu.recvtb) continue; // a fused instruction executes in one thread block
			candidates.push_back(s);
		}
		std::sort(candidates.begin(), candidates.end(), [&](const int a, const int b) { return dag.nodes[a].trace_order < dag.nodes[b].trace_order; });
		candidates.erase(std::unique(candidates.begin(), candidates.end()), candidates.end());
		return candidates;
	}

} // namespace detail

/// True if the three peephole rewrites would fire anywhere in `dag` (i.e. some remote
/// operation's receive side feeds a same-size dependent send).
inline bool has_fusion_opportunity(const instr_dag& dag) {
	detail::adjacency adj(dag.nodes.size());
	adj.add(dag.proc_edges);
	const std::vector<char> alive(dag.nodes.size(), 1);
	for(size_t u = 0; u < dag.nodes.size(); ++u) {
		if(!detail::fusable_sends(dag, adj, alive, static_cast<int>(u)).empty()) return true;
	}
	return false;
}

/// Applies the peephole rewrites to fixpoint:
///   rcs:  recv + dependent send of the same span  -> recvCopySend
///   rrcs: rrc + dependent send of its result      -> recvReduceCopySend
///   rrs:  like rrcs, but when the local result is dead (exactly overwritten later and never
///         read) the store is elided -> recvReduceSend
/// With multiple dependent sends the one on the longest path in the instruction DAG fuses;
/// ties break toward the earliest trace order. Fused nodes inherit the union of both nodes'
/// edges.
inline instr_dag fuse(const instr_dag& input) {
	instr_dag dag = input;
	std::vector<char> alive(dag.nodes.size(), 1);

	const auto rebuild_adj = [&] {
		detail::adjacency adj(dag.nodes.size());
		adj.add(dag.proc_edges);
		adj.add(dag.comm_edges);
		return adj;
	};
	const auto rebuild_proc_adj = [&] {
		detail::adjacency adj(dag.nodes.size());
		adj.add(dag.proc_edges);
		return adj;
	};

	// longest path (in edges) from each node to any sink, over the alive graph
	const auto longest_to_sink = [&](const detail::adjacency& adj) {
		std::vector<int> order;
		{
			std::vector<int> indeg(dag.nodes.size(), 0);
			for(size_t v = 0; v < dag.nodes.size(); ++v) {
				for(const int w : adj.out[v]) {
					if(alive[v] && alive[w]) ++indeg[w];
				}
			}
			std::deque<int> ready;
			for(size_t v = 0; v < dag.nodes.size(); ++v) {
				if(alive[v] && indeg[v] == 0) ready.push_back(static_cast<int>(v));
			}
			while(!ready.empty()) {
				const int v = ready.front();
				ready.pop_front();
				order.push_back(v);
				for(const int w : adj.out[v]) {
					if(alive[w] && --indeg[w] == 0) ready.push_back(w);
				}
			}
		}
		std::vector<int> dist(dag.nodes.size(), 0);
		for(auto it = order.rbegin(); it != order.rend(); ++it) {
			for(const int w : adj.out[*it]) {
				if(alive[w]) dist[*it] = std::max(dist[*it], dist[w] + 1);
			}
		}
		return dist;
	};

	const auto reachable_from = [&](const detail::adjacency& adj, const int start) {
		std::vector<char> seen(dag.nodes.size(), 0);
		std::deque<int> work{start};
		seen[start] = 1;
		while(!work.empty()) {
			const int v = work.front();
			work.pop_front();
			for(const int w : adj.out[v]) {
				if(alive[w] && !seen[w]) {
					seen[w] = 1;
					work.push_back(w);
				}
			}
		}
		return seen;
	};
	const auto reaching = [&](const detail::adjacency& adj, const int start) {
		std::vector<char> seen(dag.nodes.size(), 0);
		std::deque<int> work{start};
		seen[start] = 1;
		while(!work.empty()) {
			const int v = work.front();
			work.pop_front();
			for(const int w : adj.in[v]) {
				if(alive[w] && !seen[w]) {
					seen[w] = 1;
					work.push_back(w);
				}
			}
		}
		return seen;
	};

	bool changed = true;
	while(changed) {
		changed = false;
		auto adj = rebuild_adj();
		auto proc_adj = rebuild_proc_adj();

		std::vector<size_t> scan(dag.nodes.size());
		for(size_t i = 0; i < scan.size(); ++i) {
			scan[i] = i;
		}
		std::sort(scan.begin(), scan.end(), [&](const size_t a, const size_t b) { return dag.nodes[a].trace_order < dag.nodes[b].trace_order; });

		for(const size_t u : scan) {
			auto candidates = detail::fusable_sends(dag, proc_adj, alive, static_cast<int>(u));
			if(candidates.empty()) continue;

			int chosen = candidates[0];
			if(candidates.size() > 1) {
				const auto dist = longest_to_sink(adj);
				for(const int s : candidates) {
					if(dist[s] > dist[chosen]) chosen = s; // trace-order tie-break via scan order
				}
			}

			const auto& nu = dag.nodes[u];
			const auto& ns = dag.nodes[chosen];
			opcode fused_op = opcode::recv_copy_send;
			if(nu.op == opcode::recv_reduce_copy) {
				// rrs applies when the reduction result is dead locally: some descendant
				// overwrites exactly this span and nothing that could run after the rrc reads it
				const span written = *local_write_span(nu);
				const auto ancestors = reaching(adj, static_cast<int>(u));
				const auto descendants = reachable_from(adj, static_cast<int>(u));
				bool live = false;
				bool overwritten = false;
				bool disable = false;
				for(size_t w = 0; w < dag.nodes.size(); ++w) {
					if(!alive[w] || w == u || static_cast<int>(w) == chosen) continue;
					const auto& nw = dag.nodes[w];
					if(nw.rank != nu.rank) continue;
					for(const auto& rd : local_read_spans(nw)) {
						if(spans_alias(dag.spec, rd, written) && !ancestors[w]) live = true;
					}
					if(const auto wr = local_write_span(nw); wr.has_value() && spans_alias(dag.spec, *wr, written)) {
						if(ancestors[w]) continue;
						if(descendants[w] && *wr == written) {
							overwritten = true;
						} else {
							disable = true; // partial overlap or unordered writer
						}
					}
				}
				fused_op = (!live && overwritten && !disable) ? opcode::recv_reduce_send : opcode::recv_reduce_copy_send;
			}

			instr_node f;
			f.id = static_cast<int>(dag.nodes.size());
			f.rank = nu.rank;
			f.op = fused_op;
			f.count = nu.count;
			f.src = nu.op == opcode::recv ? *local_write_span(nu) : nu.src;
			f.dst = ns.dst;
			f.recv_peer = nu.recv_peer;
			f.send_peer = ns.send_peer;
			f.channel_directive = nu.channel_directive;
			f.instance_offset = nu.instance_offset;
			f.sendtb = ns.sendtb;
			f.recvtb = nu.recvtb;
			f.trace_order = nu.trace_order;

			const int uid = static_cast<int>(u);
			const int sid = chosen;
			dag.nodes.push_back(f);
			alive.push_back(1);
			alive[uid] = alive[sid] = 0;

			const auto remap = [&](std::vector<std::pair<int, int>>& edges) {
				std::set<std::pair<int, int>> dedup;
				for(auto& [from, to] : edges) {
					if(from == uid || from == sid) from = f.id;
					if(to == uid || to == sid) to = f.id;
					if(from != to) dedup.emplace(from, to);
				}
				edges.assign(dedup.begin(), dedup.end());
			};
			remap(dag.proc_edges);
			remap(dag.comm_edges);

			changed = true;
			break; // restart the scan with fresh adjacency
		}
	}

	// compact to contiguous ids in trace order
	std::vector<int> live_ids;
	for(size_t v = 0; v < dag.nodes.size(); ++v) {
		if(alive[v]) live_ids.push_back(static_cast<int>(v));
	}
	std::sort(live_ids.begin(), live_ids.end(), [&](const int a, const int b) { return dag.nodes[a].trace_order < dag.nodes[b].trace_order; });
	std::vector<int> new_id(dag.nodes.size(), -1);
	instr_dag out;
	out.name = dag.name;
	out.spec = dag.spec;
	out.scratch_chunks = dag.scratch_chunks;
	out.notes = dag.notes;
	for(const int v : live_ids) {
		new_id[v] = static_cast<int>(out.nodes.size());
		auto node = dag.nodes[v];
		node.id = new_id[v];
		out.nodes.push_back(std::move(node));
	}
	for(const auto& [from, to] : dag.proc_edges) {
		out.proc_edges.emplace_back(new_id[from], new_id[to]);
	}
	for(const auto& [from, to] : dag.comm_edges) {
		out.comm_edges.emplace_back(new_id[from], new_id[to]);
	}
	std::sort(out.proc_edges.begin(), out.proc_edges.end());
	std::sort(out.comm_edges.begin(), out.comm_edges.end());

	// fused chains longer than one hop share a channel; surface them for inspection
	{
		std::vector<int> parent(out.nodes.size());
		for(size_t i = 0; i < parent.size(); ++i) {
			parent[i] = static_cast<int>(i);
		}
		const std::function<int(int)> find = [&](const int x) { return parent[x] == x ? x : parent[x] = find(parent[x]); };
		for(const auto& [from, to] : out.comm_edges) {
			if(is_fused(out.nodes[from].op) || is_fused(out.nodes[to].op)) parent[find(from)] = find(to);
		}
		std::map<int, int> fused_per_chain;
		for(const auto& n : out.nodes) {
			if(is_fused(n.op)) fused_per_chain[find(n.id)]++;
		}
		for(const auto& [root, count] : fused_per_chain) {
			(void)root;
			if(count >= 2) { out.notes.push_back("fusion: chain of " + std::to_string(count) + " fused instructions shares one channel"); }
		}
	}
	return out;
}

/// Deterministic DOT rendering of the instruction DAG: communication edges red, processing
/// edges gray.
inline std::string emit_instr_dot(const instr_dag& dag) {
	std::ostringstream os;
	os << "digraph \"" << dag.name << "\" {\n";
	os << "  rankdir=TB;\n  node [shape=box, fontname=\"monospace\"];\n";
	for(const auto& n : dag.nodes) {
		os << "  i" << n.id << " [label=\"" << n.id << "@r" << n.rank << ": " << to_string(n.op) << " " << to_string(n.src) << " -> " << to_string(n.dst);
		if(n.channel >= 0) os << " ch" << n.channel;
		os << "\"];\n";
	}
	for(const auto& [from, to] : dag.comm_edges) {
		os << "  i" << from << " -> i" << to << " [color=red];\n";
	}
	for(const auto& [from, to] : dag.proc_edges) {
		os << "  i" << from << " -> i" << to << " [color=gray];\n";
	}
	os << "}\n";
	return os.str();
}

} // namespace cclforge
