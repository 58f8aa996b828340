#pragma once

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "hetspec/io.hpp"
#include "hetspec/runtime.hpp"
#include "hetspec/tree.hpp"
#include "hetspec/tuner.hpp"

namespace hetspec {

using Json = nlohmann::ordered_json;

namespace detail {

template <typename F>
auto parse_json(const std::string& what, F&& f) {
  try {
    return f();
  } catch (const Json::exception& e) {
    throw FormatError(what + ": " + e.what());
  }
}

inline Json read_json_file(const std::filesystem::path& path) {
  const std::string text = read_file(path);
  return parse_json(path.string(), [&] { return Json::parse(text); });
}

inline void write_json_file(const std::filesystem::path& path, const Json& j) { write_file(path, j.dump(2) + "\n"); }

inline Json interval_json(const Interval& iv) { return Json::array({iv.begin, iv.end}); }

inline Interval interval_from(const Json& j) {
  if (!j.is_array() || j.size() != 2) throw FormatError("interval must be a [begin, end] pair");
  Interval iv{j[0].get<std::size_t>(), j[1].get<std::size_t>()};
  if (iv.end < iv.begin) throw FormatError("interval end precedes begin");
  return iv;
}

inline Json split_json(const std::vector<Interval>& s) {
  Json a = Json::array();
  for (const auto& iv : s) a.push_back(interval_json(iv));
  return a;
}

inline std::vector<Interval> split_from(const Json& j) {
  std::vector<Interval> s;
  for (const auto& e : j) s.push_back(interval_from(e));
  return s;
}

inline Json stats_json(const LatencyStats& s) {
  return {{"median_ms", s.median_ms}, {"p10_ms", s.p10_ms}, {"p90_ms", s.p90_ms}};
}

inline LatencyStats stats_from(const Json& j) {
  LatencyStats s;
  s.median_ms = j.at("median_ms").get<double>();
  s.p10_ms = j.at("p10_ms").get<double>();
  s.p90_ms = j.at("p90_ms").get<double>();
  return s;
}

inline Json trace_json(const std::vector<RatioSample>& t) {
  Json a = Json::array();
  for (const auto& s : t) a.push_back({{"ratio", s.ratio}, {"latency", stats_json(s.stats)}});
  return a;
}

inline std::vector<RatioSample> trace_from(const Json& j) {
  std::vector<RatioSample> t;
  for (const auto& e : j) t.push_back({e.at("ratio").get<double>(), stats_from(e.at("latency"))});
  return t;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Tree: {"nodes": [{"parent", "head", "rank"}]}, root omitted
// ---------------------------------------------------------------------------

inline Json tree_to_json(const VerificationTree& t) {
  Json nodes = Json::array();
  for (const auto& n : t.non_root_nodes()) nodes.push_back({{"parent", n.parent}, {"head", n.head}, {"rank", n.rank}});
  return {{"nodes", nodes}};
}

inline VerificationTree tree_from_json(const Json& j) {
  return detail::parse_json("tree", [&] {
    std::vector<TreeNode> nodes;
    for (const auto& n : j.at("nodes"))
      nodes.push_back({n.at("parent").get<std::size_t>(), n.at("head").get<std::size_t>(), n.at("rank").get<std::size_t>()});
    return VerificationTree::from_nodes(nodes);
  });
}

// ---------------------------------------------------------------------------
// Accuracy table: {"acc": [[...], ...]}
// ---------------------------------------------------------------------------

inline Json table_to_json(const HeadAccuracyTable& t) { return {{"acc", t.rows()}}; }

inline HeadAccuracyTable table_from_json(const Json& j) {
  auto rows = detail::parse_json("accuracy table", [&] { return j.at("acc").get<std::vector<std::vector<double>>>(); });
  return HeadAccuracyTable(std::move(rows));
}

// ---------------------------------------------------------------------------
// Units
// ---------------------------------------------------------------------------

// "u0:workers=4,throttle=1;u1:workers=2,throttle=3"
inline std::vector<VirtualUnit> parse_units(const std::string& spec) {
  std::vector<VirtualUnit> units;
  std::stringstream all(spec);
  std::string item;
  while (std::getline(all, item, ';')) {
    if (item.empty()) continue;
    const auto colon = item.find(':');
    if (colon == std::string::npos || item[0] != 'u') throw ConfigError("units: expected 'u<id>:key=value,...' in '" + item + "'");
    VirtualUnit u;
    try {
      u.id = std::stoul(item.substr(1, colon - 1));
    } catch (const std::exception&) {
      throw ConfigError("units: bad unit id in '" + item + "'");
    }
    std::stringstream kvs(item.substr(colon + 1));
    std::string kv;
    while (std::getline(kvs, kv, ',')) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw ConfigError("units: expected key=value in '" + kv + "'");
      const std::string key = kv.substr(0, eq), val = kv.substr(eq + 1);
      try {
        std::size_t used = 0;
        if (key == "workers") {
          u.worker_count = std::stoul(val, &used);
        } else if (key == "throttle") {
          u.throttle = std::stod(val, &used);
        } else {
          throw ConfigError("units: unknown key '" + key + "'");
        }
        if (used != val.size()) throw std::invalid_argument(val);
      } catch (const ConfigError&) {
        throw;
      } catch (const std::exception&) {
        throw ConfigError("units: bad value '" + val + "' for " + key);
      }
    }
    if (u.worker_count < 1) throw ConfigError("units: workers must be >= 1");
    if (!(u.throttle >= 1.0)) throw ConfigError("units: throttle must be >= 1");
    units.push_back(u);
  }
  if (units.empty()) throw ConfigError("units: empty spec");
  for (std::size_t i = 0; i < units.size(); ++i)
    if (units[i].id != i) throw ConfigError("units: ids must be u0, u1, ... in order");
  return units;
}

inline std::string format_units(const std::vector<VirtualUnit>& units) {
  std::ostringstream os;
  for (std::size_t i = 0; i < units.size(); ++i) {
    if (i) os << ';';
    os << 'u' << units[i].id << ":workers=" << units[i].worker_count << ",throttle=" << units[i].throttle;
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Partition plan
// ---------------------------------------------------------------------------

inline Json plan_to_json(const PartitionPlan& p) {
  Json layers = Json::array();
  for (const auto& L : p.layers) {
    Json heads = Json::array();
    for (const auto& h : L.heads) {
      Json us = Json::array();
      for (const auto& u : h.units)
        us.push_back({{"prefix", detail::interval_json(u.prefix)}, {"pairs", detail::interval_json(u.pairs)}, {"boundary", u.boundary}});
      heads.push_back(us);
    }
    layers.push_back({{"q", detail::split_json(L.q)},
                      {"k", detail::split_json(L.k)},
                      {"v", detail::split_json(L.v)},
                      {"o", detail::split_json(L.o)},
                      {"mlp_in", detail::split_json(L.mlp_in)},
                      {"down", detail::split_json(L.down)},
                      {"heads", heads}});
  }
  return {{"units", format_units(p.units)},
          {"context_bucket", p.context_bucket},
          {"width", p.width},
          {"pair_count", p.pair_count},
          {"boundary_cols", p.boundary_cols},
          {"sparse_unit", p.sparse_unit},
          {"dense_unit", p.dense_unit},
          {"ratio", p.ratio},
          {"layers", layers},
          {"lm_head", detail::split_json(p.lm_head)},
          {"estimate",
           {{"linear", p.estimate.linear},
            {"attention", p.estimate.attention},
            {"unit0_linear", p.estimate.unit0_linear},
            {"unit0_attention", p.estimate.unit0_attention}}}};
}

inline PartitionPlan plan_from_json(const Json& j) {
  return detail::parse_json("plan", [&] {
    PartitionPlan p;
    p.units = parse_units(j.at("units").get<std::string>());
    p.context_bucket = j.at("context_bucket").get<std::size_t>();
    p.width = j.at("width").get<std::size_t>();
    p.pair_count = j.at("pair_count").get<std::size_t>();
    p.boundary_cols = j.at("boundary_cols").get<std::size_t>();
    p.sparse_unit = j.at("sparse_unit").get<std::size_t>();
    p.dense_unit = j.at("dense_unit").get<std::size_t>();
    p.ratio = j.at("ratio").get<double>();
    for (const auto& jl : j.at("layers")) {
      LayerPlan L;
      L.q = detail::split_from(jl.at("q"));
      L.k = detail::split_from(jl.at("k"));
      L.v = detail::split_from(jl.at("v"));
      L.o = detail::split_from(jl.at("o"));
      L.mlp_in = detail::split_from(jl.at("mlp_in"));
      L.down = detail::split_from(jl.at("down"));
      for (const auto& jh : jl.at("heads")) {
        HeadPlan h;
        for (const auto& ju : jh)
          h.units.push_back({detail::interval_from(ju.at("prefix")), detail::interval_from(ju.at("pairs")),
                             ju.at("boundary").get<bool>()});
        L.heads.push_back(std::move(h));
      }
      p.layers.push_back(std::move(L));
    }
    p.lm_head = detail::split_from(j.at("lm_head"));
    const auto& e = j.at("estimate");
    p.estimate = {e.at("linear").get<double>(), e.at("attention").get<double>(), e.at("unit0_linear").get<double>(),
                  e.at("unit0_attention").get<double>()};
    return p;
  });
}

// ---------------------------------------------------------------------------
// Strategy
// ---------------------------------------------------------------------------

inline Json strategy_to_json(const Strategy& s) {
  Json plans = Json::array();
  for (const auto& [bucket, plan] : s.plans) plans.push_back({{"bucket", bucket}, {"plan", plan_to_json(plan)}});
  Json cands = Json::array();
  for (const auto& c : s.provenance.candidates) {
    Json jc = {{"width", c.width}, {"feasible", c.feasible}};
    if (!c.note.empty()) jc["note"] = c.note;
    if (c.feasible) {
      jc["acceptance"] = c.acceptance;
      jc["acceptance_source"] = c.acceptance_source;
      jc["ratio"] = c.ratio;
      jc["latency"] = detail::stats_json(c.latency);
      jc["score"] = c.score;
      jc["trace"] = detail::trace_json(c.trace);
    }
    cands.push_back(jc);
  }
  Json traces = Json::array();
  for (const auto& [b, t] : s.provenance.bucket_traces) traces.push_back({{"bucket", b}, {"trace", detail::trace_json(t)}});
  return {{"width", s.width},
          {"tree", tree_to_json(s.tree)},
          {"plans", plans},
          {"provenance",
           {{"context_bucket", s.provenance.context_bucket}, {"candidates", cands}, {"bucket_traces", traces}}}};
}

inline Strategy strategy_from_json(const Json& j) {
  Strategy s = detail::parse_json("strategy", [&] {
    Strategy s;
    s.width = j.at("width").get<std::size_t>();
    s.tree = tree_from_json(j.at("tree"));
    for (const auto& e : j.at("plans")) s.plans[e.at("bucket").get<std::size_t>()] = plan_from_json(e.at("plan"));
    if (j.contains("provenance")) {
      const auto& p = j.at("provenance");
      s.provenance.context_bucket = p.value("context_bucket", std::size_t{0});
      for (const auto& jc : p.value("candidates", Json::array())) {
        WidthCandidate c;
        c.width = jc.at("width").get<std::size_t>();
        c.feasible = jc.at("feasible").get<bool>();
        c.note = jc.value("note", std::string{});
        if (c.feasible) {
          c.acceptance = jc.at("acceptance").get<double>();
          c.acceptance_source = jc.at("acceptance_source").get<std::string>();
          c.ratio = jc.at("ratio").get<double>();
          c.latency = detail::stats_from(jc.at("latency"));
          c.score = jc.at("score").get<double>();
          c.trace = detail::trace_from(jc.at("trace"));
        }
        s.provenance.candidates.push_back(std::move(c));
      }
      for (const auto& jt : p.value("bucket_traces", Json::array()))
        s.provenance.bucket_traces[jt.at("bucket").get<std::size_t>()] = detail::trace_from(jt.at("trace"));
    }
    return s;
  });
  s.validate();
  return s;
}

// Checks a strategy against the model it will run on.
inline void check_strategy(const Strategy& s, const ModelConfig& c) {
  s.validate();
  for (const auto& [bucket, plan] : s.plans) {
    if (plan.width != s.width) throw ConfigError("strategy: plan for bucket " + std::to_string(bucket) + " has a different width");
    validate_plan(plan, c);
  }
}

// ---------------------------------------------------------------------------
// Calibration prompts: one {"prompt": "..."} object per line
// ---------------------------------------------------------------------------

inline std::vector<std::string> parse_prompts_jsonl(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    out.push_back(detail::parse_json("calibration line " + std::to_string(lineno),
                                     [&] { return Json::parse(line).at("prompt").get<std::string>(); }));
  }
  return out;
}

inline std::vector<std::string> load_prompts_jsonl(const std::filesystem::path& path) {
  return parse_prompts_jsonl(detail::read_file(path));
}

}  // namespace hetspec
