// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <compare>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

namespace cclforge {

// ---------------------------------------------------------------------------
// Errors

enum class errc {
	invalid_argument,
	uninitialized_read,
	uninitialized_operand,
	double_reduce,
	stale_reference,
	out_of_range,
	overlap,
	count_mismatch,
	channel_budget_exceeded,
	threadblock_budget_exceeded,
	hint_conflict,
	dependency_width_exceeded,
	verification_failed,
	schema,
	io,
};

inline const char* to_string(const errc code) {
	switch(code) {
	case errc::invalid_argument: return "invalid_argument";
	case errc::uninitialized_read: return "uninitialized_read";
	case errc::uninitialized_operand: return "uninitialized_operand";
	case errc::double_reduce: return "double_reduce";
	case errc::stale_reference: return "stale_reference";
	case errc::out_of_range: return "out_of_range";
	case errc::overlap: return "overlap";
	case errc::count_mismatch: return "count_mismatch";
	case errc::channel_budget_exceeded: return "channel_budget_exceeded";
	case errc::threadblock_budget_exceeded: return "threadblock_budget_exceeded";
	case errc::hint_conflict: return "hint_conflict";
	case errc::dependency_width_exceeded: return "dependency_width_exceeded";
	case errc::verification_failed: return "verification_failed";
	case errc::schema: return "schema";
	case errc::io: return "io";
	}
	return "unknown";
}

class error : public std::runtime_error {
  public:
	error(const errc code, const std::string& what) : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}
	errc code() const { return code_; }

  private:
	errc code_;
};

[[noreturn]] inline void fail(const errc code, const std::string& what) { throw error(code, what); }

/// Raised on malformed serialized input. `path()` names the offending location, e.g.
/// "gpus[0].threadblocks[1].channel".
class schema_error : public error {
  public:
	schema_error(std::string path, const std::string& what) : error(errc::schema, path + ": " + what), path_(std::move(path)) {}
	const std::string& path() const { return path_; }

  private:
	std::string path_;
};

// ---------------------------------------------------------------------------
// Chunk value algebra
//
// Buffer contents are tracked symbolically: a slot holds either nothing, one
// input chunk, or a point-wise reduction of a set of input chunks. Reductions
// are canonicalized to a sorted, duplicate-free identity set so that equality
// is structural and independent of the fold order that produced them.

/// Identity of one input chunk: the (rank, index) it started at.
struct chunk_id {
	int rank = 0;
	int index = 0;
	auto operator<=>(const chunk_id&) const = default;
};

inline std::string to_string(const chunk_id& id) { return "(" + std::to_string(id.rank) + "," + std::to_string(id.index) + ")"; }

class chunk_value {
  public:
	chunk_value() = default; // uninitialized

	static chunk_value uninitialized() { return chunk_value{}; }

	static chunk_value input(const int rank, const int index) {
		chunk_value v;
		v.ids_ = {chunk_id{rank, index}};
		return v;
	}

	/// Canonicalizes `ids`: sorts and rejects duplicates. A singleton set collapses to an
	/// input chunk, so `reduction({x}) == input(x)`.
	static chunk_value reduction(std::vector<chunk_id> ids) {
		if(ids.empty()) { fail(errc::invalid_argument, "reduction over an empty identity set"); }
		std::sort(ids.begin(), ids.end());
		if(std::adjacent_find(ids.begin(), ids.end()) != ids.end()) { fail(errc::double_reduce, "duplicate input identity in reduction set"); }
		chunk_value v;
		v.ids_ = std::move(ids);
		return v;
	}

	bool is_uninitialized() const { return ids_.empty(); }
	bool is_input() const { return ids_.size() == 1; }
	bool is_reduction() const { return ids_.size() > 1; }

	/// Identity set; empty iff uninitialized.
	const std::vector<chunk_id>& ids() const { return ids_; }

	bool operator==(const chunk_value&) const = default;

	std::string str() const {
		if(is_uninitialized()) return "uninit";
		if(is_input()) return "in" + to_string(ids_[0]);
		std::string s = "red{";
		for(size_t i = 0; i < ids_.size(); ++i) {
			if(i > 0) s += ",";
			s += to_string(ids_[i]);
		}
		return s + "}";
	}

  private:
	std::vector<chunk_id> ids_; // sorted, duplicate-free
};

/// Point-wise reduction of two symbolic values: the union of their identity sets.
/// Folding the same input twice would double-count it, so intersecting sets are an error
/// rather than being absorbed.
inline chunk_value reduce_values(const chunk_value& a, const chunk_value& b) {
	if(a.is_uninitialized() || b.is_uninitialized()) { fail(errc::uninitialized_operand, "reduce with an uninitialized operand"); }
	std::vector<chunk_id> merged;
	merged.reserve(a.ids().size() + b.ids().size());
	std::merge(a.ids().begin(), a.ids().end(), b.ids().begin(), b.ids().end(), std::back_inserter(merged));
	if(std::adjacent_find(merged.begin(), merged.end()) != merged.end()) {
		fail(errc::double_reduce, "identity sets intersect: " + a.str() + " + " + b.str());
	}
	return chunk_value::reduction(std::move(merged));
}

// ---------------------------------------------------------------------------
// Buffers and spans

/// The three per-rank buffers a program can address.
enum class buffer { input, output, scratch };

inline const char* to_string(const buffer b) {
	switch(b) {
	case buffer::input: return "input";
	case buffer::output: return "output";
	case buffer::scratch: return "scratch";
	}
	return "?";
}

inline const char* short_name(const buffer b) {
	switch(b) {
	case buffer::input: return "in";
	case buffer::output: return "out";
	case buffer::scratch: return "sc";
	}
	return "?";
}

inline std::optional<buffer> parse_buffer(const std::string& s) {
	if(s == "input") return buffer::input;
	if(s == "output") return buffer::output;
	if(s == "scratch") return buffer::scratch;
	return std::nullopt;
}

/// A contiguous run of chunk slots in one buffer on one rank.
struct span {
	int rank = 0;
	buffer buf = buffer::input;
	int index = 0;
	int count = 1;

	bool operator==(const span&) const = default;
	int end() const { return index + count; }
};

inline std::string to_string(const span& s) {
	return "(r" + std::to_string(s.rank) + "," + short_name(s.buf) + "," + std::to_string(s.index) + ",n" + std::to_string(s.count) + ")";
}

/// True if the index ranges intersect (callers must already have resolved rank/buffer).
inline bool ranges_overlap(const int index_a, const int count_a, const int index_b, const int count_b) {
	return index_a < index_b + count_b && index_b < index_a + count_a;
}

// ---------------------------------------------------------------------------
// Collectives

enum class collective_kind { allreduce, allgather, reducescatter, alltoall, alltonext, custom };

inline const char* to_string(const collective_kind k) {
	switch(k) {
	case collective_kind::allreduce: return "allreduce";
	case collective_kind::allgather: return "allgather";
	case collective_kind::reducescatter: return "reducescatter";
	case collective_kind::alltoall: return "alltoall";
	case collective_kind::alltonext: return "alltonext";
	case collective_kind::custom: return "custom";
	}
	return "?";
}

inline std::optional<collective_kind> parse_collective_kind(const std::string& s) {
	for(const auto k : {collective_kind::allreduce, collective_kind::allgather, collective_kind::reducescatter, collective_kind::alltoall,
	        collective_kind::alltonext, collective_kind::custom}) {
		if(s == to_string(k)) return k;
	}
	return std::nullopt;
}

/// Signature and postcondition of a collective. The postcondition maps every (rank, output
/// index) to the value any correct algorithm must deposit there; an uninitialized entry means
/// that index is unconstrained.
struct collective_spec {
	collective_kind kind = collective_kind::custom;
	int ranks = 1;
	int input_chunks_per_rank = 1;
	int output_chunks_per_rank = 1;
	bool in_place = false;
	std::vector<std::vector<chunk_value>> postcondition; // [rank][output index]

	bool operator==(const collective_spec&) const = default;

	void check() const {
		if(ranks < 1) fail(errc::invalid_argument, "collective needs at least one rank");
		if(input_chunks_per_rank < 0 || output_chunks_per_rank < 0) fail(errc::invalid_argument, "negative chunk count");
		if(in_place && input_chunks_per_rank != output_chunks_per_rank) {
			fail(errc::invalid_argument, "in-place collective must have matching input/output chunk counts");
		}
		if(static_cast<int>(postcondition.size()) != ranks) fail(errc::invalid_argument, "postcondition must cover every rank");
		for(const auto& row : postcondition) {
			if(static_cast<int>(row.size()) != output_chunks_per_rank) fail(errc::invalid_argument, "postcondition must cover every output index");
			for(const auto& v : row) {
				for(const auto& id : v.ids()) {
					if(id.rank < 0 || id.rank >= ranks || id.index < 0 || id.index >= input_chunks_per_rank) {
						fail(errc::invalid_argument, "postcondition references invalid input identity " + to_string(id));
					}
				}
			}
		}
	}

	/// Refines the chunk granularity by `factor`: every spec-level chunk becomes `factor`
	/// consecutive sub-chunks and the postcondition is rewritten accordingly.
	collective_spec scaled(const int factor) const {
		if(factor < 1) fail(errc::invalid_argument, "scale factor must be >= 1");
		if(factor == 1) return *this;
		collective_spec fine = *this;
		fine.input_chunks_per_rank = input_chunks_per_rank * factor;
		fine.output_chunks_per_rank = output_chunks_per_rank * factor;
		fine.postcondition.assign(ranks, {});
		for(int r = 0; r < ranks; ++r) {
			fine.postcondition[r].resize(static_cast<size_t>(output_chunks_per_rank) * factor);
			for(int i = 0; i < output_chunks_per_rank; ++i) {
				const auto& coarse = postcondition[r][i];
				for(int k = 0; k < factor; ++k) {
					auto& slot = fine.postcondition[r][static_cast<size_t>(i) * factor + k];
					if(coarse.is_uninitialized()) {
						slot = chunk_value::uninitialized();
					} else {
						std::vector<chunk_id> ids;
						ids.reserve(coarse.ids().size());
						for(const auto& id : coarse.ids()) {
							ids.push_back(chunk_id{id.rank, id.index * factor + k});
						}
						slot = chunk_value::reduction(std::move(ids));
					}
				}
			}
		}
		return fine;
	}
};

/// In-place AllReduce over `nchunks` chunks per rank: every output index i on every rank must
/// hold the reduction of all ranks' input chunk i (for a single rank that is the input itself).
inline collective_spec allreduce_spec(const int ranks, const int nchunks) {
	if(ranks < 1 || nchunks < 1) fail(errc::invalid_argument, "allreduce_spec requires ranks >= 1 and nchunks >= 1");
	collective_spec spec;
	spec.kind = collective_kind::allreduce;
	spec.ranks = ranks;
	spec.input_chunks_per_rank = nchunks;
	spec.output_chunks_per_rank = nchunks;
	spec.in_place = true;
	spec.postcondition.assign(ranks, std::vector<chunk_value>(nchunks));
	for(int i = 0; i < nchunks; ++i) {
		std::vector<chunk_id> ids;
		ids.reserve(ranks);
		for(int r = 0; r < ranks; ++r) {
			ids.push_back(chunk_id{r, i});
		}
		const auto expected = chunk_value::reduction(std::move(ids));
		for(int r = 0; r < ranks; ++r) {
			spec.postcondition[r][i] = expected;
		}
	}
	spec.check();
	return spec;
}

/// AllGather: every rank contributes `chunks_per_rank` chunks and every rank ends up with all
/// of them, ordered by contributor.
inline collective_spec allgather_spec(const int ranks, const int chunks_per_rank = 1) {
	if(ranks < 1 || chunks_per_rank < 1) fail(errc::invalid_argument, "allgather_spec requires ranks >= 1 and chunks_per_rank >= 1");
	collective_spec spec;
	spec.kind = collective_kind::allgather;
	spec.ranks = ranks;
	spec.input_chunks_per_rank = chunks_per_rank;
	spec.output_chunks_per_rank = ranks * chunks_per_rank;
	spec.in_place = false;
	spec.postcondition.assign(ranks, std::vector<chunk_value>(static_cast<size_t>(ranks) * chunks_per_rank));
	for(int r = 0; r < ranks; ++r) {
		for(int j = 0; j < ranks; ++j) {
			for(int k = 0; k < chunks_per_rank; ++k) {
				spec.postcondition[r][static_cast<size_t>(j) * chunks_per_rank + k] = chunk_value::input(j, k);
			}
		}
	}
	spec.check();
	return spec;
}

/// In-place ReduceScatter: rank r owns output indices [r*c, (r+1)*c) and must hold the full
/// reduction there; all other output indices are unconstrained.
inline collective_spec reducescatter_spec(const int ranks, const int chunks_per_rank = 1) {
	if(ranks < 1 || chunks_per_rank < 1) fail(errc::invalid_argument, "reducescatter_spec requires ranks >= 1 and chunks_per_rank >= 1");
	collective_spec spec;
	spec.kind = collective_kind::reducescatter;
	spec.ranks = ranks;
	spec.input_chunks_per_rank = ranks * chunks_per_rank;
	spec.output_chunks_per_rank = ranks * chunks_per_rank;
	spec.in_place = true;
	spec.postcondition.assign(ranks, std::vector<chunk_value>(static_cast<size_t>(ranks) * chunks_per_rank));
	for(int r = 0; r < ranks; ++r) {
		for(int k = 0; k < chunks_per_rank; ++k) {
			const int index = r * chunks_per_rank + k;
			std::vector<chunk_id> ids;
			ids.reserve(ranks);
			for(int q = 0; q < ranks; ++q) {
				ids.push_back(chunk_id{q, index});
			}
			spec.postcondition[r][index] = chunk_value::reduction(std::move(ids));
		}
	}
	spec.check();
	return spec;
}

/// AllToAll transposition: input chunk i on rank j must end up on rank i at output index j.
/// `chunks_per_pair` scales each (sender, receiver) cell to a contiguous run of chunks.
inline collective_spec alltoall_spec(const int ranks, const int chunks_per_pair = 1) {
	if(ranks < 1 || chunks_per_pair < 1) fail(errc::invalid_argument, "alltoall_spec requires ranks >= 1 and chunks_per_pair >= 1");
	collective_spec spec;
	spec.kind = collective_kind::alltoall;
	spec.ranks = ranks;
	spec.input_chunks_per_rank = ranks * chunks_per_pair;
	spec.output_chunks_per_rank = ranks * chunks_per_pair;
	spec.in_place = false;
	spec.postcondition.assign(ranks, std::vector<chunk_value>(static_cast<size_t>(ranks) * chunks_per_pair));
	for(int i = 0; i < ranks; ++i) {
		for(int j = 0; j < ranks; ++j) {
			for(int k = 0; k < chunks_per_pair; ++k) {
				spec.postcondition[i][static_cast<size_t>(j) * chunks_per_pair + k] = chunk_value::input(j, i * chunks_per_pair + k);
			}
		}
	}
	spec.check();
	return spec;
}

/// AllToNext: rank i's buffer moves to rank i+1; the last rank sends nothing and rank 0's
/// output is unconstrained.
inline collective_spec alltonext_spec(const int ranks, const int chunks_per_rank = 1) {
	if(ranks < 2 || chunks_per_rank < 1) fail(errc::invalid_argument, "alltonext_spec requires ranks >= 2 and chunks_per_rank >= 1");
	collective_spec spec;
	spec.kind = collective_kind::alltonext;
	spec.ranks = ranks;
	spec.input_chunks_per_rank = chunks_per_rank;
	spec.output_chunks_per_rank = chunks_per_rank;
	spec.in_place = false;
	spec.postcondition.assign(ranks, std::vector<chunk_value>(chunks_per_rank));
	for(int i = 0; i + 1 < ranks; ++i) {
		for(int j = 0; j < chunks_per_rank; ++j) {
			spec.postcondition[i + 1][j] = chunk_value::input(i, j);
		}
	}
	spec.check();
	return spec;
}

/// A custom collective with no constrained outputs (used for hand-written IR experiments).
inline collective_spec custom_spec(const int ranks, const int input_chunks, const int output_chunks, const bool in_place = false) {
	collective_spec spec;
	spec.kind = collective_kind::custom;
	spec.ranks = ranks;
	spec.input_chunks_per_rank = input_chunks;
	spec.output_chunks_per_rank = output_chunks;
	spec.in_place = in_place;
	spec.postcondition.assign(ranks, std::vector<chunk_value>(output_chunks));
	spec.check();
	return spec;
}

// ---------------------------------------------------------------------------
// Machine description

struct link_cost {
	double alpha_us = 0.0;       ///< per-message startup latency
	double beta_us_per_mb = 0.0; ///< inverse bandwidth

	bool operator==(const link_cost&) const = default;
};

/// Two-level machine model: `nodes` nodes of `gpus_per_node` GPUs each, with one cost class
/// for intra-node links and one for inter-node links.
struct topology {
	int nodes = 1;
	int gpus_per_node = 1;
	link_cost intra{1.0, 10.0};
	link_cost inter{10.0, 100.0};
	double reduce_gamma_us_per_mb = 0.0;
	int slots = 8;            ///< FIFO slots per connection
	int max_channels = 32;    ///< channel budget per ordered GPU pair
	int max_threadblocks = 80; ///< SM budget per GPU

	bool operator==(const topology&) const = default;

	int ranks() const { return nodes * gpus_per_node; }
	int node_of(const int rank) const { return rank / gpus_per_node; }
	bool same_node(const int a, const int b) const { return node_of(a) == node_of(b); }
	const link_cost& link(const int a, const int b) const { return same_node(a, b) ? intra : inter; }

	void check() const {
		if(nodes < 1) fail(errc::invalid_argument, "topology needs at least one node");
		if(gpus_per_node < 1) fail(errc::invalid_argument, "topology needs at least one GPU per node");
		if(slots < 1 || slots > 8) fail(errc::invalid_argument, "slots must be within 1..8");
		if(intra.alpha_us < 0 || intra.beta_us_per_mb < 0 || inter.alpha_us < 0 || inter.beta_us_per_mb < 0 || reduce_gamma_us_per_mb < 0) {
			fail(errc::invalid_argument, "cost parameters must be non-negative");
		}
		if(max_channels < 1) fail(errc::invalid_argument, "max_channels must be >= 1");
		if(max_threadblocks < 1) fail(errc::invalid_argument, "max_threadblocks must be >= 1");
	}

	static topology from_json(const nlohmann::json& j);
	static topology from_json_file(const std::string& path);
};

namespace detail {

	inline void require_keys(const nlohmann::json& j, const std::string& path, const std::vector<std::string>& required,
	    const std::vector<std::string>& optional = {}) {
		if(!j.is_object()) throw schema_error(path, "expected an object");
		for(const auto& key : required) {
			if(!j.contains(key)) throw schema_error(path.empty() ? key : path + "." + key, "missing required key");
		}
		for(const auto& [key, value] : j.items()) {
			(void)value;
			if(std::find(required.begin(), required.end(), key) == required.end()
			    && std::find(optional.begin(), optional.end(), key) == optional.end()) {
				throw schema_error(path.empty() ? key : path + "." + key, "unknown key");
			}
		}
	}

	inline double get_number(const nlohmann::json& j, const std::string& path) {
		if(!j.is_number()) throw schema_error(path, "expected a number");
		return j.get<double>();
	}

	inline int get_int(const nlohmann::json& j, const std::string& path) {
		if(!j.is_number_integer()) throw schema_error(path, "expected an integer");
		return j.get<int>();
	}

	inline link_cost parse_link_cost(const nlohmann::json& j, const std::string& path) {
		require_keys(j, path, {"alpha_us", "beta_us_per_mb"});
		link_cost c;
		c.alpha_us = get_number(j.at("alpha_us"), path + ".alpha_us");
		c.beta_us_per_mb = get_number(j.at("beta_us_per_mb"), path + ".beta_us_per_mb");
		return c;
	}

} // namespace detail

inline topology topology::from_json(const nlohmann::json& j) {
	detail::require_keys(j, "", {"nodes", "gpus_per_node", "intra", "inter", "slots", "max_channels", "max_threadblocks"}, {"reduce_gamma_us_per_mb"});
	topology t;
	t.nodes = detail::get_int(j.at("nodes"), "nodes");
	t.gpus_per_node = detail::get_int(j.at("gpus_per_node"), "gpus_per_node");
	t.intra = detail::parse_link_cost(j.at("intra"), "intra");
	t.inter = detail::parse_link_cost(j.at("inter"), "inter");
	if(j.contains("reduce_gamma_us_per_mb")) { t.reduce_gamma_us_per_mb = detail::get_number(j.at("reduce_gamma_us_per_mb"), "reduce_gamma_us_per_mb"); }
	t.slots = detail::get_int(j.at("slots"), "slots");
	t.max_channels = detail::get_int(j.at("max_channels"), "max_channels");
	t.max_threadblocks = detail::get_int(j.at("max_threadblocks"), "max_threadblocks");
	t.check();
	return t;
}

inline topology topology::from_json_file(const std::string& path) {
	std::ifstream in(path);
	if(!in) fail(errc::io, "cannot open topology file " + path);
	nlohmann::json j;
	try {
		in >> j;
	} catch(const nlohmann::json::exception& e) {
		throw schema_error("", std::string("invalid JSON in ") + path + ": " + e.what());
	}
	return from_json(j);
}

// ---------------------------------------------------------------------------
// Symbolic machine state

/// Symbolic contents of every buffer slot on every rank. When the collective is in-place the
/// output buffer aliases the input buffer; reads and writes through either name observe the
/// same storage.
class buffer_state {
  public:
	buffer_state() = default;

	buffer_state(const collective_spec& spec, std::vector<int> scratch_chunks) : spec_ranks_(spec.ranks), in_place_(spec.in_place) {
		if(static_cast<int>(scratch_chunks.size()) != spec.ranks) fail(errc::invalid_argument, "scratch extent must be given per rank");
		input_.assign(spec.ranks, {});
		output_.assign(spec.ranks, {});
		scratch_.assign(spec.ranks, {});
		for(int r = 0; r < spec.ranks; ++r) {
			input_[r].resize(spec.input_chunks_per_rank);
			for(int i = 0; i < spec.input_chunks_per_rank; ++i) {
				input_[r][i] = chunk_value::input(r, i);
			}
			if(!in_place_) output_[r].assign(spec.output_chunks_per_rank, chunk_value::uninitialized());
			scratch_[r].assign(scratch_chunks[r], chunk_value::uninitialized());
		}
	}

	buffer_state(const collective_spec& spec, const int scratch_chunks) : buffer_state(spec, std::vector<int>(spec.ranks, scratch_chunks)) {}

	int ranks() const { return spec_ranks_; }
	bool in_place() const { return in_place_; }

	int extent(const int rank, const buffer buf) const { return static_cast<int>(slots(rank, buf).size()); }

	const chunk_value& at(const int rank, const buffer buf, const int index) const {
		const auto& v = slots(rank, buf);
		if(index < 0 || index >= static_cast<int>(v.size())) fail(errc::out_of_range, "slot " + to_string(span{rank, buf, index, 1}) + " out of range");
		return v[index];
	}

	void set(const int rank, const buffer buf, const int index, chunk_value value) {
		auto& v = slots(rank, buf);
		if(index < 0 || index >= static_cast<int>(v.size())) fail(errc::out_of_range, "slot " + to_string(span{rank, buf, index, 1}) + " out of range");
		v[index] = std::move(value);
	}

	bool operator==(const buffer_state&) const = default;

	/// Canonical serialization of the full machine state; equal states produce identical
	/// bytes. With aliased buffers the output array repeats the input array.
	std::string canonical_json() const {
		nlohmann::json j;
		j["gpus"] = nlohmann::json::array();
		for(int r = 0; r < spec_ranks_; ++r) {
			nlohmann::json g;
			for(const auto buf : {buffer::input, buffer::output, buffer::scratch}) {
				auto arr = nlohmann::json::array();
				for(const auto& v : slots(r, buf)) {
					arr.push_back(v.str());
				}
				g[to_string(buf)] = std::move(arr);
			}
			j["gpus"].push_back(std::move(g));
		}
		return j.dump();
	}

  private:
	int spec_ranks_ = 0;
	bool in_place_ = false;
	std::vector<std::vector<chunk_value>> input_, output_, scratch_;

	const std::vector<chunk_value>& slots(const int rank, const buffer buf) const {
		if(rank < 0 || rank >= spec_ranks_) fail(errc::out_of_range, "rank " + std::to_string(rank) + " out of range");
		switch(buf) {
		case buffer::input: return input_[rank];
		case buffer::output: return in_place_ ? input_[rank] : output_[rank];
		case buffer::scratch: return scratch_[rank];
		}
		fail(errc::invalid_argument, "bad buffer");
	}

	std::vector<chunk_value>& slots(const int rank, const buffer buf) {
		return const_cast<std::vector<chunk_value>&>(std::as_const(*this).slots(rank, buf));
	}
};

} // namespace cclforge
