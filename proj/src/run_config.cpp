#include "lqrppg/run_config.hpp"

#include "lqrppg/errors.hpp"
#include "lqrppg/eval.hpp"
#include "lqrppg/rng.hpp"

#include <toml.hpp>

#include <algorithm>
#include <cctype>
#include <cstdlib>
#include <sstream>

extern char** environ;

namespace lqrppg {
namespace {

using io::json;

enum SeedSalt : std::uint64_t { kSaltData = 1, kSaltLqInit, kSaltLqShuffle, kSaltC2fInit, kSaltC2fShuffle };

json toml_node_to_json(const toml::node& node, const std::string& where) {
  if (const auto* t = node.as_table()) {
    json out = json::object();
    for (const auto& [k, v] : *t) out[std::string(k.str())] = toml_node_to_json(v, where + "." + std::string(k.str()));
    return out;
  }
  if (const auto* a = node.as_array()) {
    json out = json::array();
    for (const auto& v : *a) out.push_back(toml_node_to_json(v, where));
    return out;
  }
  if (const auto* s = node.as_string()) return s->get();
  if (const auto* i = node.as_integer()) return i->get();
  if (const auto* f = node.as_floating_point()) return f->get();
  if (const auto* b = node.as_boolean()) return b->get();
  throw ConfigError("unsupported TOML value (dates and times are not accepted) at " + where);
}

bool same_kind(const json& base, const json& value) {
  if (base.is_number_float()) return value.is_number();
  if (base.is_number_integer()) return value.is_number_integer();
  if (base.is_string()) return value.is_string();
  if (base.is_boolean()) return value.is_boolean();
  if (base.is_array()) return value.is_array();
  if (base.is_object()) return value.is_object();
  return false;
}

std::string kind_name(const json& j) {
  if (j.is_number_float()) return "number";
  if (j.is_number_integer()) return "integer";
  return j.type_name();
}

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  return s;
}

json parse_env_value(const std::string& text) {
  try {
    const toml::table t = toml::parse("v = " + text);
    return toml_node_to_json(*t.get("v"), "env");
  } catch (const toml::parse_error&) {
    return text;
  }
}

template <class T>
T get_at(const json& j, const char* key) {
  return j.at(key).get<T>();
}

}  // namespace

SeedPlan SeedPlan::from_master(std::uint64_t master) {
  SeedPlan p;
  p.data = derive_seed(master, kSaltData);
  p.lq_init = derive_seed(master, kSaltLqInit);
  p.lq_shuffle = derive_seed(master, kSaltLqShuffle);
  p.c2f_init = derive_seed(master, kSaltC2fInit);
  p.c2f_shuffle = derive_seed(master, kSaltC2fShuffle);
  return p;
}

json default_config_json() {
  json data = to_json(GenConfig{});
  data.erase("seed");
  const Stage1Cfg s1;
  const Stage2Cfg s2;
  const EvalSection ev;
  const SweepSection sw;
  return json{
      {"seed", std::uint64_t{0}},
      {"run_root", "runs"},
      {"data", data},
      {"stage1",
       {{"max_bits", 5},
        {"epochs", s1.epochs},
        {"batch", s1.batch},
        {"lr", s1.adam.lr},
        {"weight_decay", s1.adam.weight_decay},
        {"pct_start", s1.pct_start},
        {"lambda_time", s1.loss.lambda_time},
        {"lambda_freq", s1.loss.lambda_freq},
        {"lambda_feat", s1.loss.lambda_feat},
        {"nfft", s1.loss.nfft},
        {"bits", json::array()},
        {"encoder", to_json(LqEncoderCfg{})}}},
      {"stage2",
       {{"epochs", s2.epochs},
        {"batch", s2.batch},
        {"lr", s2.adam.lr},
        {"weight_decay", s2.adam.weight_decay},
        {"pct_start", s2.pct_start},
        {"lambda_ce", s2.loss.lambda_ce},
        {"lambda_time", s2.loss.lambda_time},
        {"lambda_freq", s2.loss.lambda_freq},
        {"nfft", s2.loss.nfft},
        {"mask", json::array()},
        {"supervision", to_string(s2.supervision)},
        {"center_heads", s2.center_heads},
        {"model", to_json(C2fCfg{})}}},
      {"eval", {{"split", to_string(ev.split)}, {"hrv", ev.hrv}, {"baseline", ev.baseline}}},
      {"sweep",
       {{"kind", sw.kind},
        {"bits", sw.bits},
        {"max_bits", sw.max_bits},
        {"lambda_ce", sw.lambda_ce},
        {"seeds", sw.seeds},
        {"variants", sw.variants}}}};
}

void merge_config(json& base, const json& patch, const std::string& origin) {
  struct Walk {
    const std::string& origin;
    void operator()(json& b, const json& p, const std::string& prefix) const {
      if (!p.is_object()) throw ConfigError(origin + ": expected a table at '" + prefix + "'");
      for (const auto& [key, value] : p.items()) {
        const std::string dotted = prefix.empty() ? key : prefix + "." + key;
        if (!b.contains(key)) throw ConfigError(origin + ": unknown key '" + dotted + "'");
        json& slot = b[key];
        if (!same_kind(slot, value)) {
          throw ConfigError(origin + ": '" + dotted + "' expects " + kind_name(slot) + ", got " + kind_name(value));
        }
        if (slot.is_object()) {
          (*this)(slot, value, dotted);
        } else if (slot.is_number_float()) {
          slot = value.get<double>();
        } else {
          slot = value;
        }
      }
    }
  };
  Walk{origin}(base, patch, "");
}

json toml_to_json(const std::string& text, const std::string& origin) {
  try {
    const toml::table t = toml::parse(text, origin);
    return toml_node_to_json(t, origin);
  } catch (const toml::parse_error& e) {
    std::ostringstream msg;
    msg << origin << ":" << e.source().begin.line << ":" << e.source().begin.column << ": " << e.description();
    throw ConfigError(msg.str());
  }
}

json read_toml(const std::filesystem::path& path) {
  const std::vector<char> bytes = [&] {
    try {
      return io::read_bytes(path);
    } catch (const DataError& e) {
      throw ConfigError(std::string("cannot read config: ") + e.what());
    }
  }();
  return toml_to_json(std::string(bytes.begin(), bytes.end()), path.string());
}

json env_overrides(const std::map<std::string, std::string>& env) {
  static const std::string prefix = "LQRPPG_";
  json patch = json::object();
  for (const auto& [name, value] : env) {
    if (name.rfind(prefix, 0) != 0) continue;
    const std::string rest = name.substr(prefix.size());
    if (rest == "SEED") {
      patch["seed"] = parse_env_value(value);
    } else if (rest == "RUN_ROOT") {
      patch["run_root"] = value;
    } else if (rest.find("__") != std::string::npos) {
      std::string dotted;
      std::size_t start = 0;
      while (true) {
        const std::size_t sep = rest.find("__", start);
        dotted += lower(rest.substr(start, sep - start));
        if (sep == std::string::npos) break;
        dotted += ".";
        start = sep + 2;
      }
      set_dotted(patch, dotted, parse_env_value(value));
    } else {
      throw ConfigError("environment: unknown override " + name);
    }
  }
  return patch;
}

std::map<std::string, std::string> current_environment() {
  std::map<std::string, std::string> env;
  for (char** e = environ; e != nullptr && *e != nullptr; ++e) {
    const std::string entry(*e);
    const std::size_t eq = entry.find('=');
    if (eq != std::string::npos) env.emplace(entry.substr(0, eq), entry.substr(eq + 1));
  }
  return env;
}

void set_dotted(json& patch, const std::string& dotted, json value) {
  json* node = &patch;
  std::size_t start = 0;
  while (true) {
    const std::size_t dot = dotted.find('.', start);
    const std::string key = dotted.substr(start, dot - start);
    if (key.empty()) throw ConfigError("empty key segment in '" + dotted + "'");
    if (dot == std::string::npos) {
      (*node)[key] = std::move(value);
      return;
    }
    json& child = (*node)[key];
    if (child.is_null()) child = json::object();
    node = &child;
    start = dot + 1;
  }
}

RunConfig run_config_from_json(const json& j) {
  RunConfig c;
  try {
    const json& top_seed = j.at("seed");
    if (top_seed.is_number_integer() && top_seed.get<std::int64_t>() < 0 && !top_seed.is_number_unsigned()) {
      throw ConfigError("seed must be non-negative");
    }
    c.seed = top_seed.get<std::uint64_t>();
    c.run_root = get_at<std::string>(j, "run_root");
    if (c.run_root.empty()) throw ConfigError("run_root must not be empty");

    json data = j.at("data");
    data["seed"] = c.seeds().data;
    c.data = gen_config_from_json(data);
    c.data.validate();

    const json& s1 = j.at("stage1");
    c.lq_max_bits = get_at<int>(s1, "max_bits");
    c.encoder = lq_encoder_cfg_from_json(s1.at("encoder"));
    c.encoder.validate();
    c.stage1.epochs = get_at<int>(s1, "epochs");
    c.stage1.batch = get_at<int>(s1, "batch");
    c.stage1.adam.lr = get_at<double>(s1, "lr");
    c.stage1.adam.weight_decay = get_at<double>(s1, "weight_decay");
    c.stage1.pct_start = get_at<double>(s1, "pct_start");
    c.stage1.loss.lambda_time = get_at<double>(s1, "lambda_time");
    c.stage1.loss.lambda_freq = get_at<double>(s1, "lambda_freq");
    c.stage1.loss.lambda_feat = get_at<double>(s1, "lambda_feat");
    c.stage1.loss.nfft = get_at<int>(s1, "nfft");
    c.stage1.bits = get_at<std::vector<int>>(s1, "bits");
    c.stage1.seed = c.seeds().lq_shuffle;
    require(c.lq_max_bits >= 1 && c.lq_max_bits <= 15, "stage1.max_bits must be in 1..15");
    for (int b : c.stage1.bits) require(b >= 1 && b <= c.lq_max_bits, "stage1.bits must lie in 1..max_bits");
    c.stage1.validate();

    const json& s2 = j.at("stage2");
    c.model = c2f_cfg_from_json(s2.at("model"));
    c.model.validate();
    c.stage2.epochs = get_at<int>(s2, "epochs");
    c.stage2.batch = get_at<int>(s2, "batch");
    c.stage2.adam.lr = get_at<double>(s2, "lr");
    c.stage2.adam.weight_decay = get_at<double>(s2, "weight_decay");
    c.stage2.pct_start = get_at<double>(s2, "pct_start");
    c.stage2.loss.lambda_ce = get_at<double>(s2, "lambda_ce");
    c.stage2.loss.lambda_time = get_at<double>(s2, "lambda_time");
    c.stage2.loss.lambda_freq = get_at<double>(s2, "lambda_freq");
    c.stage2.loss.nfft = get_at<int>(s2, "nfft");
    c.stage2.loss.mask = get_at<std::vector<int>>(s2, "mask");
    c.stage2.supervision = supervision_from_string(get_at<std::string>(s2, "supervision"));
    c.stage2.center_heads = get_at<bool>(s2, "center_heads");
    c.stage2.seed = c.seeds().c2f_shuffle;
    c.stage2.validate(c.model.max_bits);

    const json& ev = j.at("eval");
    c.eval.split = split_from_string(get_at<std::string>(ev, "split"));
    c.eval.hrv = get_at<bool>(ev, "hrv");
    c.eval.baseline = get_at<std::string>(ev, "baseline");
    if (!c.eval.baseline.empty()) baseline_from_string(c.eval.baseline);

    const json& sw = j.at("sweep");
    c.sweep.kind = get_at<std::string>(sw, "kind");
    c.sweep.bits = get_at<std::vector<int>>(sw, "bits");
    c.sweep.max_bits = get_at<std::vector<int>>(sw, "max_bits");
    c.sweep.lambda_ce = get_at<std::vector<double>>(sw, "lambda_ce");
    c.sweep.seeds = get_at<std::vector<std::uint64_t>>(sw, "seeds");
    c.sweep.variants = get_at<std::vector<std::string>>(sw, "variants");
    if (!c.sweep.kind.empty() &&
        std::find(kSweepKinds.begin(), kSweepKinds.end(), c.sweep.kind) == kSweepKinds.end()) {
      throw ConfigError("unknown sweep kind '" + c.sweep.kind + "'");
    }
    for (int b : c.sweep.bits) require(b >= 1 && b <= 15, "sweep.bits must lie in 1..15");
    for (int b : c.sweep.max_bits) require(b >= 2 && b <= 15, "sweep.max_bits must lie in 2..15");
    for (double l : c.sweep.lambda_ce) require(l >= 0.0, "sweep.lambda_ce must be non-negative");
    require(!c.sweep.seeds.empty(), "sweep.seeds must not be empty");
    for (const std::string& v : c.sweep.variants) supervision_from_string(v);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  } catch (const InvalidArgument& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  return c;
}

json resolve_config(const std::filesystem::path& file, const std::map<std::string, std::string>& env,
                    const json& cli_patch) {
  json cfg = default_config_json();
  if (!file.empty()) merge_config(cfg, read_toml(file), file.string());
  merge_config(cfg, env_overrides(env), "environment");
  merge_config(cfg, cli_patch, "command line");
  run_config_from_json(cfg);
  return cfg;
}

}  // namespace lqrppg
