// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <deque>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <queue>
#include <set>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "core.hpp"
#include "ir.hpp"
#include "lowering.hpp"

namespace cclforge {

// ---------------------------------------------------------------------------
// Channel assignment
//
// Each communication edge needs a channel. Fused instructions receive and send through the
// same thread block, so the edges of a fused chain form a group that must live on one
// channel. User directives are honored verbatim; edges from parallelized fragments start
// probing at their instance offset so instances never share a channel on the same pair; all
// remaining groups take the lowest channel that keeps the one-connection-per-thread-block
// rule satisfiable.

namespace sched_detail {

	struct channel_groups {
		std::vector<std::vector<int>> edges;     // group -> comm edge indices
		std::vector<std::optional<int>> directive; // group -> pinned channel
		std::vector<int> instance_offset;
		std::vector<int> min_trace;
	};

	inline channel_groups build_channel_groups(const instr_dag& dag) {
		const auto& edges = dag.comm_edges;
		std::vector<int> parent(edges.size());
		for(size_t i = 0; i < parent.size(); ++i) {
			parent[i] = static_cast<int>(i);
		}
		const std::function<int(int)> find = [&](const int x) { return parent[x] == x ? x : parent[x] = find(parent[x]); };

		std::vector<int> incoming(dag.nodes.size(), -1), outgoing(dag.nodes.size(), -1);
		for(size_t e = 0; e < edges.size(); ++e) {
			outgoing[edges[e].first] = static_cast<int>(e);
			incoming[edges[e].second] = static_cast<int>(e);
		}
		for(const auto& n : dag.nodes) {
			if(sends(n.op) && receives(n.op) && incoming[n.id] >= 0 && outgoing[n.id] >= 0) { parent[find(incoming[n.id])] = find(outgoing[n.id]); }
		}

		std::map<int, int> root_to_group;
		channel_groups groups;
		for(size_t e = 0; e < edges.size(); ++e) {
			const int root = find(static_cast<int>(e));
			auto [it, inserted] = root_to_group.emplace(root, static_cast<int>(groups.edges.size()));
			if(inserted) {
				groups.edges.emplace_back();
				groups.directive.emplace_back();
				groups.instance_offset.push_back(0);
				groups.min_trace.push_back(std::numeric_limits<int>::max());
			}
			const int g = it->second;
			groups.edges[g].push_back(static_cast<int>(e));
			const auto& snd = dag.nodes[edges[e].first];
			if(snd.channel_directive.has_value()) {
				if(groups.directive[g].has_value() && *groups.directive[g] != *snd.channel_directive) {
					fail(errc::hint_conflict, "fused chain spans conflicting channel directives " + std::to_string(*groups.directive[g]) + " and "
					                              + std::to_string(*snd.channel_directive));
				}
				groups.directive[g] = snd.channel_directive;
			}
			groups.instance_offset[g] = std::max(groups.instance_offset[g], snd.instance_offset);
			groups.min_trace[g] = std::min(groups.min_trace[g], snd.trace_order);
		}
		return groups;
	}

	/// Per (gpu, channel): the send-peer/receive-peer pairings forced by fused instructions.
	/// They must form a partial matching or some connection would need two thread blocks.
	struct pairing_state {
		std::map<std::tuple<int, int, int>, int> send_partner; // (gpu, ch, send_peer) -> recv_peer
		std::map<std::tuple<int, int, int>, int> recv_partner; // (gpu, ch, recv_peer) -> send_peer

		bool compatible(const int gpu, const int ch, const int send_peer, const int recv_peer) const {
			if(const auto it = send_partner.find({gpu, ch, send_peer}); it != send_partner.end() && it->second != recv_peer) return false;
			if(const auto it = recv_partner.find({gpu, ch, recv_peer}); it != recv_partner.end() && it->second != send_peer) return false;
			return true;
		}
		void commit(const int gpu, const int ch, const int send_peer, const int recv_peer) {
			send_partner[{gpu, ch, send_peer}] = recv_peer;
			recv_partner[{gpu, ch, recv_peer}] = send_peer;
		}
	};

} // namespace sched_detail

/// Returns a copy of the DAG with a channel assigned to every communicating instruction.
inline instr_dag assign_channels(const instr_dag& input, const topology& topo) {
	instr_dag dag = input;
	auto groups = sched_detail::build_channel_groups(dag);

	std::vector<int> order(groups.edges.size());
	for(size_t i = 0; i < order.size(); ++i) {
		order[i] = static_cast<int>(i);
	}
	std::sort(order.begin(), order.end(), [&](const int a, const int b) {
		const bool da = groups.directive[a].has_value(), db = groups.directive[b].has_value();
		if(da != db) return da; // user-pinned groups claim their channels first
		return groups.min_trace[a] < groups.min_trace[b];
	});

	sched_detail::pairing_state pairings;
	const auto group_fits = [&](const int g, const int ch) {
		for(const int e : groups.edges[g]) {
			for(const int node : {dag.comm_edges[e].first, dag.comm_edges[e].second}) {
				const auto& n = dag.nodes[node];
				if(sends(n.op) && receives(n.op) && !pairings.compatible(n.rank, ch, n.send_peer, n.recv_peer)) return false;
			}
		}
		return true;
	};
	const auto commit_group = [&](const int g, const int ch) {
		for(const int e : groups.edges[g]) {
			for(const int node : {dag.comm_edges[e].first, dag.comm_edges[e].second}) {
				auto& n = dag.nodes[node];
				if(sends(n.op) && receives(n.op)) pairings.commit(n.rank, ch, n.send_peer, n.recv_peer);
				if(n.channel >= 0 && n.channel != ch) fail(errc::hint_conflict, "instruction assigned two channels");
				n.channel = ch;
			}
		}
	};

	for(const int g : order) {
		if(groups.directive[g].has_value()) {
			const int ch = *groups.directive[g];
			if(ch < 0 || ch >= topo.max_channels) {
				fail(errc::channel_budget_exceeded, "channel directive " + std::to_string(ch) + " exceeds budget of " + std::to_string(topo.max_channels));
			}
			if(!group_fits(g, ch)) fail(errc::hint_conflict, "channel directive " + std::to_string(ch) + " violates connection exclusivity");
			commit_group(g, ch);
		} else {
			int assigned = -1;
			for(int ch = groups.instance_offset[g]; ch < topo.max_channels; ++ch) {
				if(group_fits(g, ch)) {
					assigned = ch;
					break;
				}
			}
			if(assigned < 0) {
				fail(errc::channel_budget_exceeded,
				    "no channel available within budget of " + std::to_string(topo.max_channels) + " (instance offset " + std::to_string(groups.instance_offset[g]) + ")");
			}
			commit_group(g, assigned);
		}
	}
	return dag;
}

// ---------------------------------------------------------------------------
// Thread block layout

struct scheduled_block {
	int gpu = 0;
	int id = 0;
	int channel = 0;
	int send_peer = -1;
	int recv_peer = -1;
	std::vector<int> nodes;                // instruction ids in execution order
	std::vector<std::vector<ir_dep>> deps; // per step, filled by insert_syncs
	std::vector<char> has_dep;             // per step
};

struct tb_layout {
	std::vector<std::vector<scheduled_block>> gpus; // blocks per gpu, sorted by id
	std::vector<std::pair<int, int>> placement;     // node id -> (block id, step)
	std::vector<int> global_order;                  // node ids in the global topological order
};

namespace sched_detail {

	struct proto_block {
		int channel = -1; // -1: not yet claimed by a communicating instruction
		int send_peer = -1;
		int recv_peer = -1;
		int first_trace = std::numeric_limits<int>::max();
	};

	/// Computes the global instruction order: a topological sort driven by a heap keyed on
	/// (dependency depth ascending, reverse depth descending, trace order), with the extra
	/// constraint that receives on one connection are emitted in their senders' order so that
	/// FIFO slot matching delivers the right payload.
	inline std::vector<int> global_order(const instr_dag& dag) {
		const auto depth = comm_depths(dag);
		const auto rev = reverse_comm_depths(dag);

		detail::adjacency adj(dag.nodes.size());
		adj.add(dag.comm_edges);
		adj.add(dag.proc_edges);
		std::vector<int> indegree(dag.nodes.size(), 0);
		for(size_t v = 0; v < dag.nodes.size(); ++v) {
			std::set<int> preds(adj.in[v].begin(), adj.in[v].end());
			indegree[v] = static_cast<int>(preds.size());
		}
		// duplicate edges between the same nodes would double-count readiness
		for(size_t v = 0; v < dag.nodes.size(); ++v) {
			std::set<int> succs(adj.out[v].begin(), adj.out[v].end());
			adj.out[v].assign(succs.begin(), succs.end());
		}

		std::vector<int> matching_send(dag.nodes.size(), -1);
		for(const auto& [snd, rcv] : dag.comm_edges) {
			matching_send[rcv] = snd;
		}

		using key = std::tuple<int, int, int>; // (depth, -rev_depth, trace_order)
		const auto key_of = [&](const int v) { return key{depth[v], -rev[v], dag.nodes[v].trace_order}; };
		std::priority_queue<std::pair<key, int>, std::vector<std::pair<key, int>>, std::greater<>> heap;

		using conn = std::tuple<int, int, int>; // (src gpu, dst gpu, channel)
		std::map<conn, int> sends_scheduled, recvs_scheduled;
		std::vector<int> send_seq(dag.nodes.size(), -1);
		std::map<std::pair<conn, int>, int> parked; // (connection, sequence index) -> waiting recv

		for(size_t v = 0; v < dag.nodes.size(); ++v) {
			if(indegree[v] == 0) heap.push({key_of(static_cast<int>(v)), static_cast<int>(v)});
		}

		std::vector<int> order;
		order.reserve(dag.nodes.size());
		const auto schedule_node = [&](const int v) {
			order.push_back(v);
			const auto& n = dag.nodes[v];
			if(sends(n.op)) {
				const conn c{n.rank, n.send_peer, n.channel};
				send_seq[v] = sends_scheduled[c]++;
			}
			for(const int w : adj.out[v]) {
				if(--indegree[w] == 0) heap.push({key_of(w), w});
			}
		};

		while(!heap.empty()) {
			const auto [k, v] = heap.top();
			heap.pop();
			const auto& n = dag.nodes[v];
			if(receives(n.op)) {
				const conn c{n.recv_peer, n.rank, n.channel};
				const int seq = send_seq[matching_send[v]];
				if(seq != recvs_scheduled[c]) {
					parked[{c, seq}] = v; // an earlier message on this connection is still unreceived
					continue;
				}
				schedule_node(v);
				const int next = ++recvs_scheduled[c];
				// wake the parked receive now at the head of the queue, if any
				if(const auto it = parked.find({c, next}); it != parked.end()) {
					const int w = it->second;
					parked.erase(it);
					heap.push({key_of(w), w});
				}
			} else {
				schedule_node(v);
			}
		}
		if(order.size() != dag.nodes.size()) fail(errc::invalid_argument, "instruction graph has a cycle or an unbalanced connection");
		return order;
	}

} // namespace sched_detail

/// Creates thread blocks and assigns every instruction to one. Blocks are created per unique
/// (send-peer, receive-peer, channel) tuple on each GPU, where an unpaired one-directional
/// peer merges with an opposite unpaired peer rather than claiming its own block. Flexible
/// (purely local) instructions go to the candidate block whose latest assigned instruction is
/// earliest in the global order; manual sendtb/recvtb hints override matching entirely.
inline tb_layout assign_threadblocks(const instr_dag& dag, const topology& topo) {
	for(const auto& n : dag.nodes) {
		if((sends(n.op) || receives(n.op)) && n.channel < 0) fail(errc::invalid_argument, "assign_threadblocks requires channels to be assigned");
	}
	const int ranks = dag.spec.ranks;
	const bool manual = std::any_of(dag.nodes.begin(), dag.nodes.end(), [](const instr_node& n) { return n.sendtb.has_value() || n.recvtb.has_value(); });

	tb_layout layout;
	layout.gpus.assign(ranks, {});
	layout.placement.assign(dag.nodes.size(), {-1, -1});

	// (gpu, channel, send_peer, recv_peer) -> index into layout.gpus[gpu]
	std::map<std::tuple<int, int, int, int>, int> block_of_tuple;
	std::map<std::tuple<int, int, int>, int> send_block, recv_block; // (gpu, ch, peer) -> block index

	if(!manual) {
		for(int g = 0; g < ranks; ++g) {
			// gather peer structure per channel
			std::map<int, std::set<std::pair<int, int>>> pairs;
			std::map<int, std::set<int>> send_peers, recv_peers;
			std::map<std::tuple<int, int, int>, int> tuple_first_trace; // (ch, sp, rp) -> trace
			bool has_local = false;
			for(const auto& n : dag.nodes) {
				if(n.rank != g) continue;
				if(!sends(n.op) && !receives(n.op)) {
					has_local = true;
					continue;
				}
				if(sends(n.op)) send_peers[n.channel].insert(n.send_peer);
				if(receives(n.op)) recv_peers[n.channel].insert(n.recv_peer);
				if(sends(n.op) && receives(n.op)) pairs[n.channel].emplace(n.send_peer, n.recv_peer);
			}

			std::vector<sched_detail::proto_block> protos;
			std::set<int> channels;
			for(const auto& [ch, _] : send_peers) {
				channels.insert(ch);
			}
			for(const auto& [ch, _] : recv_peers) {
				channels.insert(ch);
			}
			for(const int ch : channels) {
				std::set<int> paired_send, paired_recv;
				for(const auto& [sp, rp] : pairs[ch]) {
					protos.push_back({ch, sp, rp});
					paired_send.insert(sp);
					paired_recv.insert(rp);
				}
				std::vector<int> loose_send, loose_recv;
				for(const int p : send_peers[ch]) {
					if(!paired_send.count(p)) loose_send.push_back(p);
				}
				for(const int p : recv_peers[ch]) {
					if(!paired_recv.count(p)) loose_recv.push_back(p);
				}
				const size_t zipped = std::min(loose_send.size(), loose_recv.size());
				for(size_t i = 0; i < zipped; ++i) {
					protos.push_back({ch, loose_send[i], loose_recv[i]});
				}
				for(size_t i = zipped; i < loose_send.size(); ++i) {
					protos.push_back({ch, loose_send[i], -1});
				}
				for(size_t i = zipped; i < loose_recv.size(); ++i) {
					protos.push_back({ch, -1, loose_recv[i]});
				}
			}
			if(protos.empty() && has_local) protos.push_back({0, -1, -1}); // peer-less block for purely local work

			// earliest appearance decides block numbering within a channel
			for(auto& proto : protos) {
				for(const auto& n : dag.nodes) {
					if(n.rank != g) continue;
					const bool send_match = sends(n.op) && n.channel == proto.channel && n.send_peer == proto.send_peer;
					const bool recv_match = receives(n.op) && n.channel == proto.channel && n.recv_peer == proto.recv_peer;
					if(send_match || recv_match) proto.first_trace = std::min(proto.first_trace, n.trace_order);
				}
			}
			std::sort(protos.begin(), protos.end(), [](const sched_detail::proto_block& a, const sched_detail::proto_block& b) {
				return std::tie(a.channel, a.first_trace, a.send_peer, a.recv_peer) < std::tie(b.channel, b.first_trace, b.send_peer, b.recv_peer);
			});

			if(static_cast<int>(protos.size()) > topo.max_threadblocks) {
				fail(errc::threadblock_budget_exceeded,
				    "gpu " + std::to_string(g) + " needs " + std::to_string(protos.size()) + " thread blocks, budget is " + std::to_string(topo.max_threadblocks));
			}
			for(size_t i = 0; i < protos.size(); ++i) {
				scheduled_block block;
				block.gpu = g;
				block.id = static_cast<int>(i);
				block.channel = protos[i].channel;
				block.send_peer = protos[i].send_peer;
				block.recv_peer = protos[i].recv_peer;
				layout.gpus[g].push_back(block);
				block_of_tuple[{g, block.channel, block.send_peer, block.recv_peer}] = static_cast<int>(i);
				if(block.send_peer >= 0) send_block[{g, block.channel, block.send_peer}] = static_cast<int>(i);
				if(block.recv_peer >= 0) recv_block[{g, block.channel, block.recv_peer}] = static_cast<int>(i);
			}
		}
	} else {
		// manual mode: thread block ids come from the program's sendtb/recvtb directives
		std::map<std::pair<int, int>, sched_detail::proto_block> manual_blocks; // (gpu, id)
		const auto claim = [&](const int gpu, const int id, const instr_node& n) {
			if(id < 0) fail(errc::hint_conflict, "negative thread block id");
			auto& proto = manual_blocks[{gpu, id}];
			proto.first_trace = std::min(proto.first_trace, n.trace_order);
			if(sends(n.op) || receives(n.op)) {
				if(sends(n.op) && n.rank == gpu) {
					if(proto.send_peer >= 0 && proto.send_peer != n.send_peer) {
						fail(errc::hint_conflict, "thread block " + std::to_string(id) + " on gpu " + std::to_string(gpu) + " is given two send peers");
					}
					proto.send_peer = n.send_peer;
				}
				if(receives(n.op) && n.rank == gpu) {
					if(proto.recv_peer >= 0 && proto.recv_peer != n.recv_peer) {
						fail(errc::hint_conflict, "thread block " + std::to_string(id) + " on gpu " + std::to_string(gpu) + " is given two receive peers");
					}
					proto.recv_peer = n.recv_peer;
				}
				if(proto.channel != 0 && proto.channel != n.channel) {
					fail(errc::hint_conflict, "thread block " + std::to_string(id) + " on gpu " + std::to_string(gpu) + " spans two channels");
				}
				proto.channel = n.channel;
			}
		};
		for(const auto& n : dag.nodes) {
			if(sends(n.op) && receives(n.op)) {
				if(n.sendtb != n.recvtb) fail(errc::hint_conflict, "fused instruction with sendtb != recvtb");
				if(!n.sendtb.has_value()) fail(errc::hint_conflict, "manual assignment requires hints on every remote operation");
				claim(n.rank, *n.sendtb, n);
			} else if(sends(n.op)) {
				if(!n.sendtb.has_value()) fail(errc::hint_conflict, "manual assignment requires hints on every remote operation");
				claim(n.rank, *n.sendtb, n);
			} else if(receives(n.op)) {
				if(!n.recvtb.has_value()) fail(errc::hint_conflict, "manual assignment requires hints on every remote operation");
				claim(n.rank, *n.recvtb, n);
			} else if(n.sendtb.has_value()) {
				claim(n.rank, *n.sendtb, n);
			}
		}
		std::map<int, int> max_id;
		for(const auto& [key, proto] : manual_blocks) {
			max_id[key.first] = std::max(max_id[key.first], key.second);
		}
		for(const auto& [gpu, id] : max_id) {
			if(id + 1 > topo.max_threadblocks) {
				fail(errc::threadblock_budget_exceeded,
				    "gpu " + std::to_string(gpu) + " needs " + std::to_string(id + 1) + " thread blocks, budget is " + std::to_string(topo.max_threadblocks));
			}
		}
		std::set<std::tuple<int, int, int>> seen_send, seen_recv;
		for(const auto& [key, proto] : manual_blocks) {
			const auto [gpu, id] = key;
			scheduled_block block;
			block.gpu = gpu;
			block.id = id;
			block.channel = proto.channel;
			block.send_peer = proto.send_peer;
			block.recv_peer = proto.recv_peer;
			if(block.send_peer >= 0 && !seen_send.emplace(gpu, block.channel, block.send_peer).second) {
				fail(errc::hint_conflict, "two thread blocks on gpu " + std::to_string(gpu) + " send to peer " + std::to_string(block.send_peer) + " on channel "
				                              + std::to_string(block.channel));
			}
			if(block.recv_peer >= 0 && !seen_recv.emplace(gpu, block.channel, block.recv_peer).second) {
				fail(errc::hint_conflict, "two thread blocks on gpu " + std::to_string(gpu) + " receive from peer " + std::to_string(block.recv_peer) + " on channel "
				                              + std::to_string(block.channel));
			}
			const int index = static_cast<int>(layout.gpus[gpu].size());
			layout.gpus[gpu].push_back(block);
			block_of_tuple[{gpu, block.channel, block.send_peer, block.recv_peer}] = index;
			if(block.send_peer >= 0) send_block[{gpu, block.channel, block.send_peer}] = index;
			if(block.recv_peer >= 0) recv_block[{gpu, block.channel, block.recv_peer}] = index;
		}
		for(auto& blocks : layout.gpus) {
			std::sort(blocks.begin(), blocks.end(), [](const scheduled_block& a, const scheduled_block& b) { return a.id < b.id; });
			block_of_tuple.clear();
			send_block.clear();
			recv_block.clear();
		}
		// rebuild lookups after sorting
		for(int g = 0; g < ranks; ++g) {
			for(size_t i = 0; i < layout.gpus[g].size(); ++i) {
				const auto& block = layout.gpus[g][i];
				block_of_tuple[{g, block.channel, block.send_peer, block.recv_peer}] = static_cast<int>(i);
				if(block.send_peer >= 0) send_block[{g, block.channel, block.send_peer}] = static_cast<int>(i);
				if(block.recv_peer >= 0) recv_block[{g, block.channel, block.recv_peer}] = static_cast<int>(i);
			}
		}
	}

	// place instructions in the global topological order
	layout.global_order = sched_detail::global_order(dag);
	std::vector<std::vector<int>> last_assigned(ranks); // per gpu, per block index: global position of last instruction
	for(int g = 0; g < ranks; ++g) {
		last_assigned[g].assign(layout.gpus[g].size(), -1);
	}
	for(size_t pos = 0; pos < layout.global_order.size(); ++pos) {
		const int v = layout.global_order[pos];
		const auto& n = dag.nodes[v];
		const int g = n.rank;
		int block_index = -1;
		if(manual && !sends(n.op) && !receives(n.op) && n.sendtb.has_value()) {
			for(size_t i = 0; i < layout.gpus[g].size(); ++i) {
				if(layout.gpus[g][i].id == *n.sendtb) block_index = static_cast<int>(i);
			}
			if(block_index < 0) fail(errc::hint_conflict, "sendtb hint names an unknown thread block");
		} else if(sends(n.op) && receives(n.op)) {
			block_index = block_of_tuple.at({g, n.channel, n.send_peer, n.recv_peer});
		} else if(sends(n.op)) {
			block_index = send_block.at({g, n.channel, n.send_peer});
		} else if(receives(n.op)) {
			block_index = recv_block.at({g, n.channel, n.recv_peer});
		} else {
			// flexible: the candidate whose latest assigned instruction is earliest
			if(layout.gpus[g].empty()) fail(errc::invalid_argument, "no thread block available for local instruction");
			block_index = 0;
			for(size_t i = 1; i < layout.gpus[g].size(); ++i) {
				if(last_assigned[g][i] < last_assigned[g][block_index]) block_index = static_cast<int>(i);
			}
		}
		auto& block = layout.gpus[g][block_index];
		layout.placement[v] = {block.id, static_cast<int>(block.nodes.size())};
		block.nodes.push_back(v);
		last_assigned[g][block_index] = static_cast<int>(pos);
	}

	for(auto& blocks : layout.gpus) {
		for(auto& block : blocks) {
			block.deps.assign(block.nodes.size(), {});
			block.has_dep.assign(block.nodes.size(), 0);
		}
	}
	return layout;
}

/// Materializes cross-thread-block processing edges as (depBid, depStep) entries. Edges whose
/// endpoints share a block are satisfied by sequential execution; communication edges
/// synchronize implicitly and never produce entries.
inline void insert_syncs(tb_layout& layout, const instr_dag& dag, const int dep_width = 4) {
	std::vector<int> block_id(dag.nodes.size()), step(dag.nodes.size());
	for(size_t v = 0; v < dag.nodes.size(); ++v) {
		block_id[v] = layout.placement[v].first;
		step[v] = layout.placement[v].second;
	}
	const auto block_by_id = [&](const int gpu, const int id) -> scheduled_block& {
		for(auto& block : layout.gpus[gpu]) {
			if(block.id == id) return block;
		}
		fail(errc::invalid_argument, "unknown thread block");
	};

	std::map<std::pair<int, int>, int> pending; // (successor node, predecessor block) -> max step
	for(const auto& [u, v] : dag.proc_edges) {
		if(dag.nodes[u].rank != dag.nodes[v].rank) continue; // processing edges are intra-rank by construction
		if(block_id[u] == block_id[v]) continue;
		auto [it, inserted] = pending.emplace(std::pair{v, block_id[u]}, step[u]);
		if(!inserted) it->second = std::max(it->second, step[u]);
		block_by_id(dag.nodes[u].rank, block_id[u]).has_dep[step[u]] = 1;
	}
	for(const auto& [key, dep_step] : pending) {
		const auto [v, dep_block] = key;
		auto& block = block_by_id(dag.nodes[v].rank, block_id[v]);
		block.deps[step[v]].push_back(ir_dep{dep_block, dep_step});
	}
	for(auto& blocks : layout.gpus) {
		for(auto& block : blocks) {
			for(auto& deps : block.deps) {
				std::sort(deps.begin(), deps.end(), [](const ir_dep& a, const ir_dep& b) { return a.tb < b.tb; });
				if(static_cast<int>(deps.size()) > dep_width) {
					fail(errc::dependency_width_exceeded,
					    "instruction depends on " + std::to_string(deps.size()) + " thread blocks, limit is " + std::to_string(dep_width));
				}
			}
		}
	}
}

struct schedule_options {
	protocol proto = protocol::simple;
	int dep_width = 4;
	size_range sizes;
};

/// Emits the serialized program from a completed layout.
inline ir_program emit_ir(const instr_dag& dag, const tb_layout& layout, const schedule_options& opts = {}) {
	ir_program ir;
	ir.name = dag.name;
	ir.collective = to_string(dag.spec.kind);
	ir.proto = opts.proto;
	ir.inplace = dag.spec.in_place;
	ir.nchunks.input = dag.spec.input_chunks_per_rank;
	ir.nchunks.output = dag.spec.output_chunks_per_rank;
	ir.nchunks.scratch = 0;
	for(const int s : dag.scratch_chunks) {
		ir.nchunks.scratch = std::max(ir.nchunks.scratch, s);
	}
	ir.sizes = opts.sizes;
	ir.gpus.resize(dag.spec.ranks);
	for(int g = 0; g < dag.spec.ranks; ++g) {
		ir.gpus[g].rank = g;
		for(const auto& block : layout.gpus[g]) {
			ir_threadblock tb;
			tb.id = block.id;
			tb.send_peer = block.send_peer;
			tb.recv_peer = block.recv_peer;
			tb.channel = block.channel;
			for(size_t s = 0; s < block.nodes.size(); ++s) {
				const auto& n = dag.nodes[block.nodes[s]];
				ir_op op;
				op.step = static_cast<int>(s);
				op.op = n.op;
				op.src_buf = n.src.buf;
				op.src_off = n.src.index;
				op.dst_buf = n.dst.buf;
				op.dst_off = n.dst.index;
				op.count = n.count;
				op.deps = block.deps[s];
				op.has_dep = block.has_dep[s] != 0;
				tb.ops.push_back(std::move(op));
			}
			ir.gpus[g].threadblocks.push_back(std::move(tb));
		}
	}
	return ir;
}

/// Full scheduling pipeline: channels, thread blocks, synchronization, serialization model.
inline ir_program schedule(const instr_dag& dag, const topology& topo, const schedule_options& opts = {}) {
	const auto with_channels = assign_channels(dag, topo);
	auto layout = assign_threadblocks(with_channels, topo);
	insert_syncs(layout, with_channels, opts.dep_width);
	return emit_ir(with_channels, layout, opts);
}

// ---------------------------------------------------------------------------
// Slot safety

struct slot_violation {
	int src_gpu = 0;
	int dst_gpu = 0;
	int channel = 0;
	int send_tb = 0;
	int send_step = 0;
	std::string what;
};

/// Static check that no schedule requires more than `slots` outstanding sends on any
/// connection: scanning each sender block, the k-th send can only proceed once the receiver
/// has completed receive k-slots, which must not (transitively) depend on that send.
inline std::vector<slot_violation> check_slots(const ir_program& ir, const int slots) {
	std::vector<slot_violation> violations;
	if(slots < 1) fail(errc::invalid_argument, "slots must be >= 1");

	// flatten to (gpu, tb, step) units
	struct unit {
		int gpu, tb, step;
	};
	std::map<std::tuple<int, int, int>, int> index;
	std::vector<unit> units;
	for(const auto& gpu : ir.gpus) {
		for(const auto& tb : gpu.threadblocks) {
			for(size_t s = 0; s < tb.ops.size(); ++s) {
				index[{gpu.rank, tb.id, static_cast<int>(s)}] = static_cast<int>(units.size());
				units.push_back({gpu.rank, tb.id, static_cast<int>(s)});
			}
		}
	}

	std::vector<std::vector<int>> succ(units.size());
	const auto add_edge = [&](const int from, const int to) { succ[from].push_back(to); };

	struct connection {
		std::vector<int> send_units;
		std::vector<int> recv_units;
	};
	std::map<std::tuple<int, int, int>, connection> connections; // (src, dst, channel)

	for(const auto& gpu : ir.gpus) {
		for(const auto& tb : gpu.threadblocks) {
			for(size_t s = 0; s < tb.ops.size(); ++s) {
				const int u = index.at({gpu.rank, tb.id, static_cast<int>(s)});
				if(s + 1 < tb.ops.size()) add_edge(u, u + 1); // sequential execution
				for(const auto& dep : tb.ops[s].deps) {
					if(const auto it = index.find({gpu.rank, dep.tb, dep.step}); it != index.end()) add_edge(it->second, u);
				}
				if(sends(tb.ops[s].op) && tb.send_peer >= 0) connections[{gpu.rank, tb.send_peer, tb.channel}].send_units.push_back(u);
				if(receives(tb.ops[s].op) && tb.recv_peer >= 0) connections[{tb.recv_peer, gpu.rank, tb.channel}].recv_units.push_back(u);
			}
		}
	}
	for(auto& [key, conn] : connections) {
		if(conn.send_units.size() != conn.recv_units.size()) {
			const auto [src, dst, ch] = key;
			violations.push_back({src, dst, ch, -1, -1, "unbalanced connection"});
			continue;
		}
		for(size_t k = 0; k < conn.send_units.size(); ++k) {
			add_edge(conn.send_units[k], conn.recv_units[k]); // a receive happens after its matching send
		}
	}

	// transitive reachability over the happens-before graph
	const size_t n = units.size();
	std::vector<std::vector<uint64_t>> reach(n, std::vector<uint64_t>((n + 63) / 64, 0));
	// topological order via Kahn; the graph is acyclic for compiler output, and for malformed
	// hand-written IR we fall back to reporting nothing extra (cycles imply deadlock anyway)
	std::vector<int> indeg(n, 0);
	for(size_t u = 0; u < n; ++u) {
		for(const int v : succ[u]) {
			++indeg[v];
		}
	}
	std::deque<int> ready;
	for(size_t u = 0; u < n; ++u) {
		if(indeg[u] == 0) ready.push_back(static_cast<int>(u));
	}
	std::vector<int> topo_order;
	while(!ready.empty()) {
		const int u = ready.front();
		ready.pop_front();
		topo_order.push_back(u);
		for(const int v : succ[u]) {
			if(--indeg[v] == 0) ready.push_back(v);
		}
	}
	for(auto it = topo_order.rbegin(); it != topo_order.rend(); ++it) {
		const int u = *it;
		reach[u][u / 64] |= 1ull << (u % 64);
		for(const int v : succ[u]) {
			for(size_t w = 0; w < reach[u].size(); ++w) {
				reach[u][w] |= reach[v][w];
			}
		}
	}
	const auto reaches = [&](const int a, const int b) { return (reach[a][b / 64] >> (b % 64)) & 1; };

	for(const auto& [key, conn] : connections) {
		if(conn.send_units.size() != conn.recv_units.size()) continue;
		for(size_t k = slots; k < conn.send_units.size(); ++k) {
			const int snd = conn.send_units[k];
			const int required_recv = conn.recv_units[k - slots];
			if(reaches(snd, required_recv)) {
				const auto [src, dst, ch] = key;
				violations.push_back({src, dst, ch, units[snd].tb, units[snd].step,
				    "send " + std::to_string(k) + " on connection " + std::to_string(src) + "->" + std::to_string(dst) + " ch " + std::to_string(ch) + " needs slot "
				        + std::to_string(k - slots) + " freed, but that receive depends on this send"});
			}
		}
	}
	return violations;
}

} // namespace cclforge
