#pragma once

#include <algorithm>
#include <array>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "mage/errors.hpp"
#include "mage/rng.hpp"

namespace mage::agent {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Modalities and tool specs
// ---------------------------------------------------------------------------

enum class Modality { text = 0, image = 1, audio = 2, video = 3 };

constexpr std::array<Modality, 4> kAllModalities = {Modality::text, Modality::image,
                                                    Modality::audio, Modality::video};

inline const char* modality_name(Modality m) {
  switch (m) {
    case Modality::text: return "text";
    case Modality::image: return "image";
    case Modality::audio: return "audio";
    case Modality::video: return "video";
  }
  return "?";
}

inline std::optional<Modality> try_parse_modality(const std::string& s) {
  for (Modality m : kAllModalities)
    if (s == modality_name(m)) return m;
  return std::nullopt;
}

inline Modality parse_modality(const std::string& s) {
  if (auto m = try_parse_modality(s)) return *m;
  throw ConfigError("bad modality '" + s + "'");
}

struct ParamSpec {
  enum class Type { string_t, number_t, boolean_t };
  Type type = Type::string_t;
  bool required = false;
};

inline const char* param_type_name(ParamSpec::Type t) {
  switch (t) {
    case ParamSpec::Type::string_t: return "string";
    case ParamSpec::Type::number_t: return "number";
    case ParamSpec::Type::boolean_t: return "boolean";
  }
  return "?";
}

inline ParamSpec::Type parse_param_type(const std::string& s) {
  if (s == "string") return ParamSpec::Type::string_t;
  if (s == "number") return ParamSpec::Type::number_t;
  if (s == "boolean") return ParamSpec::Type::boolean_t;
  throw ConfigError("bad param type '" + s + "'");
}

struct ToolSpec {
  std::string name;
  std::set<Modality> inputs;
  std::set<Modality> outputs;
  std::map<std::string, ParamSpec> params_schema;
  double cost = 1.0;
};

class ToolRegistry {
 public:
  void add(ToolSpec spec) {
    if (spec.name.empty()) throw ConfigError("tool name must not be empty");
    if (spec.inputs.empty() || spec.outputs.empty())
      throw ConfigError("tool '" + spec.name + "' must declare inputs and outputs");
    if (spec.cost <= 0.0) throw ConfigError("tool '" + spec.name + "' must have positive cost");
    if (find(spec.name)) throw ConfigError("duplicate tool name '" + spec.name + "'");
    tools_.push_back(std::move(spec));
  }

  const ToolSpec* find(const std::string& name) const {
    for (const ToolSpec& t : tools_)
      if (t.name == name) return &t;
    return nullptr;
  }

  const std::vector<ToolSpec>& tools() const { return tools_; }
  bool empty() const { return tools_.empty(); }

  static ToolRegistry from_json(const json& doc) {
    if (!doc.is_array()) throw ConfigError("registry: expected a JSON array of tool specs");
    ToolRegistry reg;
    for (const json& t : doc) {
      ToolSpec spec;
      spec.name = t.at("name").get<std::string>();
      for (const json& m : t.at("inputs")) spec.inputs.insert(parse_modality(m.get<std::string>()));
      for (const json& m : t.at("outputs")) spec.outputs.insert(parse_modality(m.get<std::string>()));
      if (t.contains("params_schema")) {
        for (const auto& [pname, pspec] : t.at("params_schema").items()) {
          ParamSpec ps;
          ps.type = parse_param_type(pspec.at("type").get<std::string>());
          ps.required = pspec.value("required", false);
          spec.params_schema[pname] = ps;
        }
      }
      spec.cost = t.value("cost", 1.0);
      reg.add(std::move(spec));
    }
    return reg;
  }

  json to_json() const {
    json arr = json::array();
    for (const ToolSpec& t : tools_) {
      json jt;
      jt["name"] = t.name;
      jt["inputs"] = json::array();
      for (Modality m : t.inputs) jt["inputs"].push_back(modality_name(m));
      jt["outputs"] = json::array();
      for (Modality m : t.outputs) jt["outputs"].push_back(modality_name(m));
      jt["params_schema"] = json::object();
      for (const auto& [pname, ps] : t.params_schema)
        jt["params_schema"][pname] = {{"type", param_type_name(ps.type)}, {"required", ps.required}};
      jt["cost"] = t.cost;
      arr.push_back(std::move(jt));
    }
    return arr;
  }

 private:
  std::vector<ToolSpec> tools_;
};

// The mock toolset used by the demo CLI and the synthetic stage-3 data.
inline ToolRegistry default_registry() {
  ToolRegistry reg;
  auto tool = [](std::string name, Modality in, Modality out,
                 std::map<std::string, ParamSpec> params = {}) {
    ToolSpec t;
    t.name = std::move(name);
    t.inputs = {in};
    t.outputs = {out};
    t.params_schema = std::move(params);
    return t;
  };
  reg.add(tool("image_to_text", Modality::image, Modality::text,
               {{"detail", {ParamSpec::Type::boolean_t, false}}}));
  reg.add(tool("text_to_image", Modality::text, Modality::image,
               {{"prompt", {ParamSpec::Type::string_t, true}}}));
  reg.add(tool("text_to_audio", Modality::text, Modality::audio,
               {{"voice", {ParamSpec::Type::string_t, false}}}));
  reg.add(tool("text_to_video", Modality::text, Modality::video,
               {{"duration", {ParamSpec::Type::number_t, false}}}));
  reg.add(tool("audio_to_text", Modality::audio, Modality::text));
  reg.add(tool("video_to_text", Modality::video, Modality::text));
  return reg;
}

// ---------------------------------------------------------------------------
// Task plans
// ---------------------------------------------------------------------------

struct PlanStep {
  int id = 0;
  std::string tool;
  json params = json::object();
  std::vector<int> depends_on;
  // One consumed modality per dependency; for root steps, the single entry
  // names the request modality the step starts from. Not part of the wire
  // format; rebuilt from `produces` during validation.
  std::vector<Modality> consumes;
  Modality produces = Modality::text;
};

struct TaskPlan {
  std::string plan_id;
  std::vector<PlanStep> steps;
  std::vector<int> final_outputs;
};

struct Request {
  std::set<Modality> have;
  json params = json::object();
  std::set<Modality> want;
};

struct NoRouteError : Error {
  std::vector<Modality> unreachable;
  explicit NoRouteError(std::vector<Modality> mods)
      : Error(make_message(mods)), unreachable(std::move(mods)) {}
  static std::string make_message(const std::vector<Modality>& mods) {
    std::string msg = "no route to requested modality:";
    for (Modality m : mods) msg += std::string(" ") + modality_name(m);
    return msg;
  }
};

struct PlanParseError : Error {
  explicit PlanParseError(const std::string& msg) : Error(msg) {}
};

// ---------------------------------------------------------------------------
// Planner: deterministic shortest chains over the modality graph
// ---------------------------------------------------------------------------

namespace detail {

struct ChainEdge {
  std::string tool;
  Modality from;
  Modality to;
  double cost;
};

// Minimum-cost chain from any modality in `have` to `target`. Between chains
// of equal cost the lexicographically smallest tool-name sequence wins, which
// keeps the planner deterministic and gives the brute-force oracle an exact
// target to reproduce.
inline std::optional<std::vector<ChainEdge>> best_chain(const std::set<Modality>& have,
                                                        Modality target,
                                                        const ToolRegistry& registry) {
  std::vector<ChainEdge> edges;
  for (const ToolSpec& t : registry.tools())
    for (Modality in : t.inputs)
      for (Modality out : t.outputs)
        if (in != out) edges.push_back({t.name, in, out, t.cost});
  std::sort(edges.begin(), edges.end(), [](const ChainEdge& a, const ChainEdge& b) {
    if (a.tool != b.tool) return a.tool < b.tool;
    if (a.from != b.from) return a.from < b.from;
    return a.to < b.to;
  });

  struct State {
    bool reachable = false;
    double cost = 0.0;
    std::vector<ChainEdge> path;
  };
  auto tool_seq = [](const std::vector<ChainEdge>& p) {
    std::vector<std::string> names;
    names.reserve(p.size());
    for (const ChainEdge& e : p) names.push_back(e.tool);
    return names;
  };
  auto better = [&](double cost_a, const std::vector<ChainEdge>& a, const State& b) {
    if (!b.reachable) return true;
    if (cost_a != b.cost) return cost_a < b.cost;
    return tool_seq(a) < tool_seq(b.path);
  };

  std::array<State, 4> dist;
  std::array<bool, 4> settled{};
  for (Modality m : have) dist[static_cast<int>(m)] = {true, 0.0, {}};

  for (int round = 0; round < 4; ++round) {
    int u = -1;
    for (int i = 0; i < 4; ++i) {
      if (settled[i] || !dist[i].reachable) continue;
      if (u < 0 || better(dist[i].cost, dist[i].path, dist[u])) u = i;
    }
    if (u < 0) break;
    settled[u] = true;
    for (const ChainEdge& e : edges) {
      if (static_cast<int>(e.from) != u) continue;
      const int v = static_cast<int>(e.to);
      std::vector<ChainEdge> cand = dist[u].path;
      cand.push_back(e);
      const double cand_cost = dist[u].cost + e.cost;
      if (better(cand_cost, cand, dist[v])) dist[v] = {true, cand_cost, std::move(cand)};
    }
  }
  const State& s = dist[static_cast<int>(target)];
  if (!s.reachable) return std::nullopt;
  return s.path;
}

// Fill a step's params from the request, defaulting required params the
// request does not provide so that planner output always validates.
inline json fill_params(const ToolSpec& tool, const json& request_params) {
  json out = json::object();
  for (const auto& [pname, ps] : tool.params_schema) {
    const bool provided = request_params.is_object() && request_params.contains(pname);
    bool type_ok = false;
    if (provided) {
      const json& v = request_params.at(pname);
      type_ok = (ps.type == ParamSpec::Type::string_t && v.is_string()) ||
                (ps.type == ParamSpec::Type::number_t && v.is_number()) ||
                (ps.type == ParamSpec::Type::boolean_t && v.is_boolean());
    }
    if (provided && type_ok) {
      out[pname] = request_params.at(pname);
    } else if (ps.required) {
      switch (ps.type) {
        case ParamSpec::Type::string_t: out[pname] = ""; break;
        case ParamSpec::Type::number_t: out[pname] = 0; break;
        case ParamSpec::Type::boolean_t: out[pname] = false; break;
      }
    }
  }
  return out;
}

}  // namespace detail

// Builds one minimum-cost chain per wanted modality; chains with a common
// prefix share the prefix steps. Wanted modalities already available in the
// request need no steps. Throws NoRouteError listing every unreachable
// modality.
inline TaskPlan plan(const Request& request, const ToolRegistry& registry) {
  std::vector<Modality> unreachable;
  std::map<Modality, std::vector<detail::ChainEdge>> chains;
  for (Modality want : request.want) {
    if (request.have.count(want)) continue;
    auto chain = detail::best_chain(request.have, want, registry);
    if (!chain) {
      unreachable.push_back(want);
    } else {
      chains[want] = std::move(*chain);
    }
  }
  if (!unreachable.empty()) throw NoRouteError(std::move(unreachable));

  TaskPlan out;
  // Key: (tool, dependency step or -1, consumed modality) so common prefixes
  // collapse into one step.
  std::map<std::tuple<std::string, int, int>, int> emitted;
  for (Modality want : kAllModalities) {
    if (!chains.count(want)) continue;
    int prev_step = -1;
    for (const detail::ChainEdge& e : chains[want]) {
      auto key = std::make_tuple(e.tool, prev_step, static_cast<int>(e.from));
      auto it = emitted.find(key);
      if (it != emitted.end()) {
        prev_step = it->second;
        continue;
      }
      PlanStep step;
      step.id = static_cast<int>(out.steps.size()) + 1;
      step.tool = e.tool;
      step.params = detail::fill_params(*registry.find(e.tool), request.params);
      if (prev_step >= 0) step.depends_on.push_back(prev_step);
      step.consumes.push_back(e.from);
      step.produces = e.to;
      emitted[key] = step.id;
      prev_step = step.id;
      out.steps.push_back(std::move(step));
    }
    if (prev_step >= 0) out.final_outputs.push_back(prev_step);
  }

  std::string fingerprint;
  for (Modality m : request.have) fingerprint += std::string("h:") + modality_name(m) + ";";
  for (Modality m : request.want) fingerprint += std::string("w:") + modality_name(m) + ";";
  for (const PlanStep& s : out.steps) fingerprint += s.tool + ";";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "plan-%016llx",
                static_cast<unsigned long long>(fnv1a64(fingerprint)));
  out.plan_id = buf;
  return out;
}

// ---------------------------------------------------------------------------
// Wire format and validation
// ---------------------------------------------------------------------------

// Canonical serialization: steps ordered by id, depends_on and final_outputs
// sorted, keys sorted (nlohmann objects), no insignificant whitespace.
inline json plan_to_json_doc(const TaskPlan& plan) {
  TaskPlan copy = plan;
  std::sort(copy.steps.begin(), copy.steps.end(),
            [](const PlanStep& a, const PlanStep& b) { return a.id < b.id; });
  json doc;
  doc["plan_id"] = copy.plan_id;
  doc["steps"] = json::array();
  for (const PlanStep& s : copy.steps) {
    json js;
    js["id"] = s.id;
    js["tool"] = s.tool;
    js["params"] = s.params.is_object() ? s.params : json::object();
    auto deps = s.depends_on;
    std::sort(deps.begin(), deps.end());
    js["depends_on"] = deps;
    js["produces"] = modality_name(s.produces);
    doc["steps"].push_back(std::move(js));
  }
  auto finals = copy.final_outputs;
  std::sort(finals.begin(), finals.end());
  doc["final_outputs"] = finals;
  return doc;
}

inline std::string plan_to_json(const TaskPlan& plan) { return plan_to_json_doc(plan).dump(); }

namespace detail {

// Structural and registry-independent semantic checks; registry-dependent
// checks run only when a registry is supplied. Returns all violations.
inline void collect_violations(const json& doc, const ToolRegistry* registry,
                               std::vector<std::string>& out, TaskPlan* parsed) {
  if (!doc.is_object()) {
    out.push_back("plan document must be a JSON object");
    return;
  }
  for (const auto& [key, value] : doc.items()) {
    (void)value;
    if (key != "plan_id" && key != "steps" && key != "final_outputs")
      out.push_back("unknown field '" + key + "' in plan document");
  }
  if (!doc.contains("plan_id") || !doc.at("plan_id").is_string())
    out.push_back("plan_id must be a string");
  if (!doc.contains("steps") || !doc.at("steps").is_array()) {
    out.push_back("steps must be an array");
    return;
  }
  if (!doc.contains("final_outputs") || !doc.at("final_outputs").is_array())
    out.push_back("final_outputs must be an array of step ids");

  TaskPlan plan;
  if (doc.contains("plan_id") && doc.at("plan_id").is_string())
    plan.plan_id = doc.at("plan_id").get<std::string>();

  std::set<int> seen_ids;
  std::map<int, Modality> produces_of;
  for (size_t si = 0; si < doc.at("steps").size(); ++si) {
    const json& js = doc.at("steps")[si];
    const std::string where = "step at index " + std::to_string(si);
    if (!js.is_object()) {
      out.push_back(where + " must be an object");
      continue;
    }
    for (const auto& [key, value] : js.items()) {
      (void)value;
      if (key != "id" && key != "tool" && key != "params" && key != "depends_on" &&
          key != "produces")
        out.push_back("unknown field '" + key + "' in " + where);
    }
    PlanStep step;
    bool id_ok = js.contains("id") && js.at("id").is_number_integer();
    if (!id_ok) {
      out.push_back(where + ": id must be an integer");
      continue;
    }
    step.id = js.at("id").get<int>();
    const std::string label = "step " + std::to_string(step.id);
    if (seen_ids.count(step.id)) {
      out.push_back("duplicate step id " + std::to_string(step.id));
      continue;
    }

    if (!js.contains("tool") || !js.at("tool").is_string()) {
      out.push_back(label + ": tool must be a string");
    } else {
      step.tool = js.at("tool").get<std::string>();
    }
    if (!js.contains("params") || !js.at("params").is_object()) {
      out.push_back(label + ": params must be an object");
    } else {
      step.params = js.at("params");
    }

    bool produces_ok = false;
    if (!js.contains("produces") || !js.at("produces").is_string()) {
      out.push_back(label + ": produces must be a modality string");
    } else if (auto m = try_parse_modality(js.at("produces").get<std::string>())) {
      step.produces = *m;
      produces_ok = true;
    } else {
      out.push_back("bad modality '" + js.at("produces").get<std::string>() + "' at " + label);
    }

    if (!js.contains("depends_on") || !js.at("depends_on").is_array()) {
      out.push_back(label + ": depends_on must be an array of step ids");
    } else {
      for (const json& d : js.at("depends_on")) {
        if (!d.is_number_integer()) {
          out.push_back(label + ": depends_on entries must be integers");
          continue;
        }
        const int dep = d.get<int>();
        step.depends_on.push_back(dep);
        if (dep == step.id) {
          out.push_back("cycle at step " + std::to_string(step.id));
        } else if (!seen_ids.count(dep)) {
          out.push_back("forward reference: step " + std::to_string(step.id) + " depends on step " +
                        std::to_string(dep));
        } else {
          step.consumes.push_back(produces_of.at(dep));
        }
      }
    }

    const ToolSpec* tool = nullptr;
    if (registry && !step.tool.empty()) {
      tool = registry->find(step.tool);
      if (!tool) out.push_back("unknown tool '" + step.tool + "' at " + label);
    }
    if (tool) {
      for (const auto& [pname, ps] : tool->params_schema) {
        if (!step.params.contains(pname)) {
          if (ps.required)
            out.push_back("missing required param '" + pname + "' at " + label);
          continue;
        }
        const json& v = step.params.at(pname);
        const bool type_ok = (ps.type == ParamSpec::Type::string_t && v.is_string()) ||
                             (ps.type == ParamSpec::Type::number_t && v.is_number()) ||
                             (ps.type == ParamSpec::Type::boolean_t && v.is_boolean());
        if (!type_ok)
          out.push_back("param '" + pname + "' at " + label + " must be " +
                        param_type_name(ps.type));
      }
      for (const auto& [pname, v] : step.params.items()) {
        (void)v;
        if (!tool->params_schema.count(pname))
          out.push_back("unknown param '" + pname + "' at " + label);
      }
      if (produces_ok && !tool->outputs.count(step.produces))
        out.push_back("tool '" + step.tool + "' cannot produce " + modality_name(step.produces) +
                      " at " + label);
      for (size_t di = 0; di < step.consumes.size(); ++di) {
        if (!tool->inputs.count(step.consumes[di]))
          out.push_back(label + " cannot consume " + modality_name(step.consumes[di]) +
                        " produced by step " + std::to_string(step.depends_on[di]));
      }
    }

    seen_ids.insert(step.id);
    produces_of[step.id] = step.produces;
    plan.steps.push_back(std::move(step));
  }

  if (doc.contains("final_outputs") && doc.at("final_outputs").is_array()) {
    for (const json& f : doc.at("final_outputs")) {
      if (!f.is_number_integer()) {
        out.push_back("final_outputs entries must be integers");
        continue;
      }
      const int id = f.get<int>();
      plan.final_outputs.push_back(id);
      if (!seen_ids.count(id))
        out.push_back("final_outputs references unknown step " + std::to_string(id));
    }
  }
  if (parsed) *parsed = std::move(plan);
}

}  // namespace detail

// Returns every violation found, not just the first. Accepts untrusted input.
inline std::vector<std::string> validate(const json& doc, const ToolRegistry& registry) {
  std::vector<std::string> violations;
  detail::collect_violations(doc, &registry, violations, nullptr);
  return violations;
}

inline std::vector<std::string> validate(const std::string& bytes, const ToolRegistry& registry) {
  json doc;
  try {
    doc = json::parse(bytes);
  } catch (const json::parse_error& e) {
    throw PlanParseError(std::string("plan parse error at byte ") + std::to_string(e.byte) + ": " +
                         e.what());
  }
  return validate(doc, registry);
}

// Strict parse of the wire format; registry-independent checks only.
inline TaskPlan json_to_plan(const std::string& bytes) {
  json doc;
  try {
    doc = json::parse(bytes);
  } catch (const json::parse_error& e) {
    throw PlanParseError(std::string("plan parse error at byte ") + std::to_string(e.byte) + ": " +
                         e.what());
  }
  std::vector<std::string> violations;
  TaskPlan plan;
  detail::collect_violations(doc, nullptr, violations, &plan);
  if (!violations.empty()) throw PlanParseError("invalid plan: " + violations.front());
  return plan;
}

// ---------------------------------------------------------------------------
// Execution
// ---------------------------------------------------------------------------

enum class StepStatus { ok, failed, skipped };

inline const char* step_status_name(StepStatus s) {
  switch (s) {
    case StepStatus::ok: return "ok";
    case StepStatus::failed: return "failed";
    case StepStatus::skipped: return "skipped";
  }
  return "?";
}

struct StepRecord {
  int step_id = 0;
  int order = -1;  // execution start index; -1 for skipped steps
  StepStatus status = StepStatus::skipped;
  std::string artifact;  // output artifact or error message
};

struct ExecutionTrace {
  std::string plan_id;
  std::vector<StepRecord> records;
  std::vector<std::string> final_artifacts;
  bool all_ok = true;

  const StepRecord* record_for(int step_id) const {
    for (const StepRecord& r : records)
      if (r.step_id == step_id) return &r;
    return nullptr;
  }
};

// An executor receives the step and the artifacts of its dependencies in
// depends_on order; throwing marks the step failed.
using Executor = std::function<std::string(const PlanStep&, const std::vector<std::string>&)>;
using ExecutorMap = std::map<std::string, Executor>;

// Pure executors that stamp their inputs into a deterministic artifact string.
inline ExecutorMap make_mock_executors(const ToolRegistry& registry) {
  ExecutorMap out;
  for (const ToolSpec& t : registry.tools()) {
    out[t.name] = [name = t.name](const PlanStep& step, const std::vector<std::string>& inputs) {
      std::string s = name + "(";
      for (size_t i = 0; i < inputs.size(); ++i) {
        if (i) s += ",";
        s += inputs[i];
      }
      if (!step.params.empty()) s += ";" + step.params.dump();
      return s + ")";
    };
  }
  return out;
}

// Dependency-ordered execution. A step runs only after all its dependencies
// succeeded; failure marks every transitive dependent skipped.
inline ExecutionTrace execute(const TaskPlan& plan, const ToolRegistry& registry,
                              const ExecutorMap& executors) {
  for (const PlanStep& s : plan.steps)
    if (!executors.count(s.tool))
      throw ConfigError("no executor for tool '" + s.tool + "' (step " + std::to_string(s.id) + ")");

  ExecutionTrace trace;
  trace.plan_id = plan.plan_id;
  std::map<int, const PlanStep*> by_id;
  for (const PlanStep& s : plan.steps) by_id[s.id] = &s;
  std::map<int, StepStatus> status;
  std::map<int, std::string> artifacts;

  // Plans reference only earlier steps, so id order is a topological order;
  // execute ready steps in ascending id order for determinism.
  std::vector<int> order;
  for (const auto& [id, step] : by_id) {
    (void)step;
    order.push_back(id);
  }
  int next_index = 0;
  for (int id : order) {
    const PlanStep& step = *by_id.at(id);
    bool ready = true;
    for (int dep : step.depends_on) {
      auto it = status.find(dep);
      if (it == status.end() || it->second != StepStatus::ok) ready = false;
    }
    StepRecord rec;
    rec.step_id = id;
    if (!ready) {
      rec.status = StepStatus::skipped;
      rec.artifact = "dependency not satisfied";
      status[id] = StepStatus::skipped;
      trace.all_ok = false;
      trace.records.push_back(std::move(rec));
      continue;
    }
    std::vector<std::string> inputs;
    if (step.depends_on.empty()) {
      const Modality from = step.consumes.empty()
                                ? (registry.find(step.tool) ? *registry.find(step.tool)->inputs.begin()
                                                            : Modality::text)
                                : step.consumes.front();
      inputs.push_back(std::string("request:") + modality_name(from));
    } else {
      for (int dep : step.depends_on) inputs.push_back(artifacts.at(dep));
    }
    rec.order = next_index++;
    try {
      rec.artifact = executors.at(step.tool)(step, inputs);
      rec.status = StepStatus::ok;
      artifacts[id] = rec.artifact;
    } catch (const std::exception& e) {
      rec.status = StepStatus::failed;
      rec.artifact = e.what();
      trace.all_ok = false;
    }
    status[id] = rec.status;
    trace.records.push_back(std::move(rec));
  }

  for (int id : plan.final_outputs) {
    auto it = artifacts.find(id);
    if (it != artifacts.end()) trace.final_artifacts.push_back(it->second);
  }
  return trace;
}

inline json trace_to_json(const ExecutionTrace& trace) {
  json doc;
  doc["plan_id"] = trace.plan_id;
  doc["all_ok"] = trace.all_ok;
  doc["records"] = json::array();
  for (const StepRecord& r : trace.records)
    doc["records"].push_back({{"step", r.step_id},
                              {"order", r.order},
                              {"status", step_status_name(r.status)},
                              {"artifact", r.artifact}});
  doc["final_artifacts"] = trace.final_artifacts;
  return doc;
}

}  // namespace mage::agent
