// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "core.hpp"
#include "lowering.hpp"

namespace cclforge {

enum class protocol { simple, ll, ll128 };

inline const char* to_string(const protocol p) {
	switch(p) {
	case protocol::simple: return "simple";
	case protocol::ll: return "ll";
	case protocol::ll128: return "ll128";
	}
	return "?";
}

inline std::optional<protocol> parse_protocol(const std::string& s) {
	if(s == "simple") return protocol::simple;
	if(s == "ll") return protocol::ll;
	if(s == "ll128") return protocol::ll128;
	return std::nullopt;
}

/// FIFO slot count defined by a protocol (placeholder constants; the protocol tag never
/// changes functional semantics, only cost-model parameters).
inline int protocol_slots(const protocol p) {
	switch(p) {
	case protocol::simple: return 2;
	case protocol::ll: return 8;
	case protocol::ll128: return 4;
	}
	return 2;
}

inline double protocol_alpha_factor(const protocol p) {
	switch(p) {
	case protocol::simple: return 1.0;
	case protocol::ll: return 0.25;
	case protocol::ll128: return 0.5;
	}
	return 1.0;
}

inline double protocol_beta_factor(const protocol p) {
	switch(p) {
	case protocol::simple: return 1.0;
	case protocol::ll: return 2.0;
	case protocol::ll128: return 1.07;
	}
	return 1.0;
}

struct ir_dep {
	int tb = 0;
	int step = 0;
	bool operator==(const ir_dep&) const = default;
};

struct ir_op {
	int step = 0;
	opcode op = opcode::nop;
	buffer src_buf = buffer::input;
	int src_off = 0;
	buffer dst_buf = buffer::input;
	int dst_off = 0;
	int count = 1;
	std::vector<ir_dep> deps; ///< cross-thread-block dependencies, at most one per block
	bool has_dep = false;     ///< true iff some later instruction waits on this one

	bool operator==(const ir_op&) const = default;
};

struct ir_threadblock {
	int id = 0;
	int send_peer = -1; ///< -1 encodes "no peer"
	int recv_peer = -1;
	int channel = 0;
	std::vector<ir_op> ops;

	bool operator==(const ir_threadblock&) const = default;
};

struct ir_gpu {
	int rank = 0;
	std::vector<ir_threadblock> threadblocks;

	bool operator==(const ir_gpu&) const = default;
};

struct nchunks_info {
	int input = 0;
	int output = 0;
	int scratch = 0;
	bool operator==(const nchunks_info&) const = default;
};

struct size_range {
	uint64_t min_bytes = 0;
	uint64_t max_bytes = 1ull << 40; // 1 TB default upper bound for runtime selection
	bool operator==(const size_range&) const = default;
};

/// Scheduled compiler output: per-GPU thread blocks, each a sequential instruction list with
/// channel, peers and cross-thread-block dependencies.
struct ir_program {
	std::string name;
	std::string collective;
	protocol proto = protocol::simple;
	bool inplace = false;
	nchunks_info nchunks;
	size_range sizes;
	std::vector<ir_gpu> gpus;

	bool operator==(const ir_program&) const = default;

	int ranks() const { return static_cast<int>(gpus.size()); }

	const ir_threadblock* find_block(const int rank, const int tb) const {
		if(rank < 0 || rank >= ranks()) return nullptr;
		for(const auto& block : gpus[rank].threadblocks) {
			if(block.id == tb) return &block;
		}
		return nullptr;
	}
};

// ---------------------------------------------------------------------------
// Serialization

inline std::string serialize(const ir_program& ir) {
	nlohmann::json j;
	j["name"] = ir.name;
	j["collective"] = ir.collective;
	j["protocol"] = to_string(ir.proto);
	j["inplace"] = ir.inplace;
	j["nchunks"] = {{"input", ir.nchunks.input}, {"output", ir.nchunks.output}, {"scratch", ir.nchunks.scratch}};
	j["size_range"] = {{"min_bytes", ir.sizes.min_bytes}, {"max_bytes", ir.sizes.max_bytes}};
	j["gpus"] = nlohmann::json::array();
	for(const auto& gpu : ir.gpus) {
		nlohmann::json jg;
		jg["rank"] = gpu.rank;
		jg["threadblocks"] = nlohmann::json::array();
		for(const auto& tb : gpu.threadblocks) {
			nlohmann::json jt;
			jt["id"] = tb.id;
			jt["send_peer"] = tb.send_peer;
			jt["recv_peer"] = tb.recv_peer;
			jt["channel"] = tb.channel;
			jt["ops"] = nlohmann::json::array();
			for(const auto& op : tb.ops) {
				nlohmann::json jo;
				jo["step"] = op.step;
				jo["opcode"] = to_string(op.op);
				jo["src_buf"] = to_string(op.src_buf);
				jo["src_off"] = op.src_off;
				jo["dst_buf"] = to_string(op.dst_buf);
				jo["dst_off"] = op.dst_off;
				jo["count"] = op.count;
				jo["deps"] = nlohmann::json::array();
				for(const auto& dep : op.deps) {
					jo["deps"].push_back({{"tb", dep.tb}, {"step", dep.step}});
				}
				jo["has_dep"] = op.has_dep;
				jt["ops"].push_back(std::move(jo));
			}
			jg["threadblocks"].push_back(std::move(jt));
		}
		j["gpus"].push_back(std::move(jg));
	}
	return j.dump(2) + "\n"; // nlohmann orders keys lexicographically: canonical bytes
}

namespace ir_detail {

	inline const nlohmann::json& get(const nlohmann::json& j, const std::string& key, const std::string& path) {
		if(!j.contains(key)) throw schema_error(path.empty() ? key : path + "." + key, "missing required key");
		return j.at(key);
	}

	inline std::string key_path(const std::string& path, const std::string& key) { return path.empty() ? key : path + "." + key; }

	inline int as_int(const nlohmann::json& j, const std::string& path) {
		if(!j.is_number_integer()) throw schema_error(path, "expected an integer");
		return j.get<int>();
	}

	inline uint64_t as_uint64(const nlohmann::json& j, const std::string& path) {
		if(!j.is_number_integer()) throw schema_error(path, "expected an integer");
		if(!j.is_number_unsigned() && j.get<int64_t>() < 0) throw schema_error(path, "expected a non-negative integer");
		return j.get<uint64_t>();
	}

	inline bool as_bool(const nlohmann::json& j, const std::string& path) {
		if(!j.is_boolean()) throw schema_error(path, "expected a boolean");
		return j.get<bool>();
	}

	inline std::string as_string(const nlohmann::json& j, const std::string& path) {
		if(!j.is_string()) throw schema_error(path, "expected a string");
		return j.get<std::string>();
	}

	inline buffer as_buffer(const nlohmann::json& j, const std::string& path) {
		const auto b = parse_buffer(as_string(j, path));
		if(!b) throw schema_error(path, "expected one of \"input\", \"output\", \"scratch\"");
		return *b;
	}

} // namespace ir_detail

inline ir_program deserialize(const std::string& text) {
	using namespace ir_detail;
	nlohmann::json j;
	try {
		j = nlohmann::json::parse(text);
	} catch(const nlohmann::json::exception& e) {
		throw schema_error("", std::string("invalid JSON: ") + e.what());
	}
	detail::require_keys(j, "", {"name", "collective", "protocol", "inplace", "nchunks", "size_range", "gpus"});

	ir_program ir;
	ir.name = as_string(get(j, "name", ""), "name");
	ir.collective = as_string(get(j, "collective", ""), "collective");
	if(!parse_collective_kind(ir.collective)) throw schema_error("collective", "unknown collective \"" + ir.collective + "\"");
	const auto proto = parse_protocol(as_string(get(j, "protocol", ""), "protocol"));
	if(!proto) throw schema_error("protocol", "expected one of \"simple\", \"ll\", \"ll128\"");
	ir.proto = *proto;
	ir.inplace = as_bool(get(j, "inplace", ""), "inplace");

	const auto& jn = get(j, "nchunks", "");
	detail::require_keys(jn, "nchunks", {"input", "output", "scratch"});
	ir.nchunks.input = as_int(jn.at("input"), "nchunks.input");
	ir.nchunks.output = as_int(jn.at("output"), "nchunks.output");
	ir.nchunks.scratch = as_int(jn.at("scratch"), "nchunks.scratch");

	const auto& js = get(j, "size_range", "");
	detail::require_keys(js, "size_range", {"min_bytes", "max_bytes"});
	ir.sizes.min_bytes = as_uint64(js.at("min_bytes"), "size_range.min_bytes");
	ir.sizes.max_bytes = as_uint64(js.at("max_bytes"), "size_range.max_bytes");

	const auto& jgpus = get(j, "gpus", "");
	if(!jgpus.is_array()) throw schema_error("gpus", "expected an array");
	for(size_t g = 0; g < jgpus.size(); ++g) {
		const std::string gpath = "gpus[" + std::to_string(g) + "]";
		const auto& jg = jgpus[g];
		detail::require_keys(jg, gpath, {"rank", "threadblocks"});
		ir_gpu gpu;
		gpu.rank = as_int(jg.at("rank"), gpath + ".rank");
		const auto& jtbs = jg.at("threadblocks");
		if(!jtbs.is_array()) throw schema_error(gpath + ".threadblocks", "expected an array");
		for(size_t t = 0; t < jtbs.size(); ++t) {
			const std::string tpath = gpath + ".threadblocks[" + std::to_string(t) + "]";
			const auto& jt = jtbs[t];
			detail::require_keys(jt, tpath, {"id", "send_peer", "recv_peer", "channel", "ops"});
			ir_threadblock tb;
			tb.id = as_int(jt.at("id"), tpath + ".id");
			tb.send_peer = as_int(jt.at("send_peer"), tpath + ".send_peer");
			tb.recv_peer = as_int(jt.at("recv_peer"), tpath + ".recv_peer");
			tb.channel = as_int(jt.at("channel"), tpath + ".channel");
			const auto& jops = jt.at("ops");
			if(!jops.is_array()) throw schema_error(tpath + ".ops", "expected an array");
			for(size_t o = 0; o < jops.size(); ++o) {
				const std::string opath = tpath + ".ops[" + std::to_string(o) + "]";
				const auto& jo = jops[o];
				detail::require_keys(jo, opath, {"step", "opcode", "src_buf", "src_off", "dst_buf", "dst_off", "count", "deps", "has_dep"});
				ir_op op;
				op.step = as_int(jo.at("step"), opath + ".step");
				const auto oc = parse_opcode(as_string(jo.at("opcode"), opath + ".opcode"));
				if(!oc) throw schema_error(opath + ".opcode", "unknown opcode");
				op.op = *oc;
				op.src_buf = as_buffer(jo.at("src_buf"), opath + ".src_buf");
				op.src_off = as_int(jo.at("src_off"), opath + ".src_off");
				op.dst_buf = as_buffer(jo.at("dst_buf"), opath + ".dst_buf");
				op.dst_off = as_int(jo.at("dst_off"), opath + ".dst_off");
				op.count = as_int(jo.at("count"), opath + ".count");
				const auto& jdeps = jo.at("deps");
				if(!jdeps.is_array()) throw schema_error(opath + ".deps", "expected an array");
				for(size_t d = 0; d < jdeps.size(); ++d) {
					const std::string dpath = opath + ".deps[" + std::to_string(d) + "]";
					const auto& jd = jdeps[d];
					detail::require_keys(jd, dpath, {"tb", "step"});
					ir_dep dep;
					dep.tb = as_int(jd.at("tb"), dpath + ".tb");
					dep.step = as_int(jd.at("step"), dpath + ".step");
					op.deps.push_back(dep);
				}
				op.has_dep = as_bool(jo.at("has_dep"), opath + ".has_dep");
				tb.ops.push_back(std::move(op));
			}
			gpu.threadblocks.push_back(std::move(tb));
		}
		ir.gpus.push_back(std::move(gpu));
	}
	return ir;
}

inline void write_file_atomic(const std::string& path, const std::string& contents) {
	const std::string tmp = path + ".tmp";
	{
		std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
		if(!out) fail(errc::io, "cannot write " + tmp);
		out << contents;
	}
	if(std::rename(tmp.c_str(), path.c_str()) != 0) fail(errc::io, "cannot rename " + tmp + " to " + path);
}

inline ir_program load_ir_file(const std::string& path) {
	std::ifstream in(path, std::ios::binary);
	if(!in) fail(errc::io, "cannot open IR file " + path);
	std::ostringstream buf;
	buf << in.rdbuf();
	return deserialize(buf.str());
}

// ---------------------------------------------------------------------------
// Structural validation

struct validation_issue {
	std::string what;
};

/// Re-checks all structural invariants independently of the scheduler: one connection per
/// (peer, direction, channel), balanced and count-matched connections, in-range spans, intact
/// dependency references, and resource budgets. Semantic properties (deadlock freedom, data
/// races) are the simulator's job.
inline std::vector<validation_issue> validate(const ir_program& ir, const topology& topo) {
	std::vector<validation_issue> issues;
	const auto complain = [&](const std::string& what) { issues.push_back({what}); };

	const int ranks = ir.ranks();
	if(ranks != topo.ranks()) complain("program has " + std::to_string(ranks) + " gpus but topology has " + std::to_string(topo.ranks()));
	if(ir.inplace && ir.nchunks.input != ir.nchunks.output) complain("in-place program must have matching input/output chunk counts");
	if(ir.nchunks.input < 0 || ir.nchunks.output < 0 || ir.nchunks.scratch < 0) complain("negative chunk count");

	const auto buffer_extent = [&](const buffer b) {
		switch(b) {
		case buffer::input: return ir.nchunks.input;
		case buffer::output: return ir.nchunks.output;
		case buffer::scratch: return ir.nchunks.scratch;
		}
		return 0;
	};

	for(int r = 0; r < ranks; ++r) {
		const auto& gpu = ir.gpus[r];
		if(gpu.rank != r) complain("gpus[" + std::to_string(r) + "] has rank " + std::to_string(gpu.rank) + ", expected " + std::to_string(r));
		if(static_cast<int>(gpu.threadblocks.size()) > topo.max_threadblocks) {
			complain("gpu " + std::to_string(r) + " uses " + std::to_string(gpu.threadblocks.size()) + " thread blocks, budget is "
			         + std::to_string(topo.max_threadblocks));
		}
		std::set<int> tb_ids;
		std::set<std::pair<int, int>> send_conns, recv_conns;
		for(const auto& tb : gpu.threadblocks) {
			const std::string where = "gpu " + std::to_string(r) + " tb " + std::to_string(tb.id);
			if(!tb_ids.insert(tb.id).second) complain(where + ": duplicate thread block id");
			if(tb.channel < 0 || tb.channel >= topo.max_channels) complain(where + ": channel " + std::to_string(tb.channel) + " out of budget");
			for(const int peer : {tb.send_peer, tb.recv_peer}) {
				if(peer < -1 || peer >= ranks || peer == r) complain(where + ": invalid peer " + std::to_string(peer));
			}
			if(tb.send_peer >= 0 && !send_conns.emplace(tb.send_peer, tb.channel).second) {
				complain(where + ": a second thread block sends to peer " + std::to_string(tb.send_peer) + " on channel " + std::to_string(tb.channel));
			}
			if(tb.recv_peer >= 0 && !recv_conns.emplace(tb.recv_peer, tb.channel).second) {
				complain(where + ": a second thread block receives from peer " + std::to_string(tb.recv_peer) + " on channel " + std::to_string(tb.channel));
			}
			for(size_t s = 0; s < tb.ops.size(); ++s) {
				const auto& op = tb.ops[s];
				const std::string op_where = where + " step " + std::to_string(s);
				if(op.step != static_cast<int>(s)) complain(op_where + ": step field is " + std::to_string(op.step));
				if(op.count < 1) complain(op_where + ": count must be >= 1");
				if(sends(op.op) && tb.send_peer < 0) complain(op_where + ": " + to_string(op.op) + " in a thread block without a send peer");
				if(receives(op.op) && tb.recv_peer < 0) complain(op_where + ": " + to_string(op.op) + " in a thread block without a receive peer");
				if(op.src_off < 0 || op.src_off + op.count > buffer_extent(op.src_buf)) complain(op_where + ": src span exceeds " + to_string(op.src_buf) + " extent");
				if(op.dst_off < 0 || op.dst_off + op.count > buffer_extent(op.dst_buf)) complain(op_where + ": dst span exceeds " + to_string(op.dst_buf) + " extent");
				std::set<int> dep_tbs;
				for(const auto& dep : op.deps) {
					if(!dep_tbs.insert(dep.tb).second) complain(op_where + ": duplicate dependency on tb " + std::to_string(dep.tb));
					if(dep.tb == tb.id) complain(op_where + ": dependency on own thread block");
					const auto* target = ir.find_block(r, dep.tb);
					if(target == nullptr) {
						complain(op_where + ": dependency on nonexistent tb " + std::to_string(dep.tb));
					} else if(dep.step < 0 || dep.step >= static_cast<int>(target->ops.size())) {
						complain(op_where + ": dependency on nonexistent step " + std::to_string(dep.step) + " of tb " + std::to_string(dep.tb));
					} else if(!target->ops[dep.step].has_dep) {
						complain(op_where + ": dependency target tb " + std::to_string(dep.tb) + " step " + std::to_string(dep.step) + " lacks has_dep");
					}
				}
			}
		}
	}

	// connection symmetry: every sending side needs exactly one receiving side with matching
	// message counts, pairwise
	for(int r = 0; r < ranks; ++r) {
		for(const auto& tb : ir.gpus[r].threadblocks) {
			if(tb.send_peer < 0) continue;
			if(tb.send_peer >= ranks) continue;
			std::vector<int> send_counts;
			for(const auto& op : tb.ops) {
				if(sends(op.op)) send_counts.push_back(op.count);
			}
			const ir_threadblock* receiver = nullptr;
			for(const auto& other : ir.gpus[tb.send_peer].threadblocks) {
				if(other.recv_peer == r && other.channel == tb.channel) receiver = &other;
			}
			if(receiver == nullptr) {
				if(!send_counts.empty()) {
					complain("connection " + std::to_string(r) + "->" + std::to_string(tb.send_peer) + " ch " + std::to_string(tb.channel)
					         + " has no receiving thread block");
				}
				continue;
			}
			std::vector<int> recv_counts;
			for(const auto& op : receiver->ops) {
				if(receives(op.op)) recv_counts.push_back(op.count);
			}
			if(send_counts != recv_counts) {
				complain("connection " + std::to_string(r) + "->" + std::to_string(tb.send_peer) + " ch " + std::to_string(tb.channel) + " is unbalanced: "
				         + std::to_string(send_counts.size()) + " sends vs " + std::to_string(recv_counts.size()) + " receives (or counts differ)");
			}
		}
	}
	return issues;
}

/// Deterministic DOT rendering of the scheduled program: one cluster per GPU, one chain per
/// thread block, dashed edges for cross-thread-block dependencies.
inline std::string emit_ir_dot(const ir_program& ir) {
	std::ostringstream os;
	os << "digraph \"" << ir.name << "\" {\n";
	os << "  rankdir=TB;\n  node [shape=box, fontname=\"monospace\"];\n";
	for(const auto& gpu : ir.gpus) {
		os << "  subgraph cluster_gpu" << gpu.rank << " {\n    label=\"gpu " << gpu.rank << "\";\n";
		for(const auto& tb : gpu.threadblocks) {
			for(size_t s = 0; s < tb.ops.size(); ++s) {
				const auto& op = tb.ops[s];
				os << "    g" << gpu.rank << "t" << tb.id << "s" << s << " [label=\"tb" << tb.id << "." << s << " " << to_string(op.op) << " "
				   << short_name(op.src_buf) << op.src_off << "->" << short_name(op.dst_buf) << op.dst_off << " n" << op.count << "\"];\n";
			}
			for(size_t s = 1; s < tb.ops.size(); ++s) {
				os << "    g" << gpu.rank << "t" << tb.id << "s" << s - 1 << " -> g" << gpu.rank << "t" << tb.id << "s" << s << ";\n";
			}
		}
		os << "  }\n";
	}
	for(const auto& gpu : ir.gpus) {
		for(const auto& tb : gpu.threadblocks) {
			for(size_t s = 0; s < tb.ops.size(); ++s) {
				for(const auto& dep : tb.ops[s].deps) {
					os << "  g" << gpu.rank << "t" << dep.tb << "s" << dep.step << " -> g" << gpu.rank << "t" << tb.id << "s" << s << " [style=dashed];\n";
				}
			}
		}
	}
	os << "}\n";
	return os.str();
}

} // namespace cclforge
