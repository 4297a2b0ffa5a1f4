#include "ulast/config.hpp"

#include <fstream>
#include <functional>
#include <json.hpp>
#include <sstream>

#include "ulast/error.hpp"

namespace ulast {

using nlohmann::json;

namespace {

struct Field {
  std::string key;
  std::function<void(RunConfig&, const json&)> read;
  std::function<void(const RunConfig&, json&)> write;
};

[[noreturn]] void bad(const std::string& key, const std::string& what) {
  throw ConfigError("config key '" + key + "': " + what);
}

template <class Get>
Field real(std::string key, Get get) {
  return {key,
          [key, get](RunConfig& c, const json& v) {
            if (!v.is_number()) bad(key, "expected a number");
            get(c) = v.get<double>();
          },
          [key, get](const RunConfig& c, json& out) { out[key] = get(const_cast<RunConfig&>(c)); }};
}

template <class Get>
Field count(std::string key, Get get) {
  return {key,
          [key, get](RunConfig& c, const json& v) {
            if (!v.is_number_unsigned()) bad(key, "expected a non-negative integer");
            get(c) = v.get<std::uint64_t>();
          },
          [key, get](const RunConfig& c, json& out) { out[key] = get(const_cast<RunConfig&>(c)); }};
}

template <class Get>
Field flag(std::string key, Get get) {
  return {key,
          [key, get](RunConfig& c, const json& v) {
            if (!v.is_boolean()) bad(key, "expected true or false");
            get(c) = v.get<bool>();
          },
          [key, get](const RunConfig& c, json& out) { out[key] = get(const_cast<RunConfig&>(c)); }};
}

template <class Get>
Field text(std::string key, Get get) {
  return {key,
          [key, get](RunConfig& c, const json& v) {
            if (!v.is_string()) bad(key, "expected a string");
            get(c) = v.get<std::string>();
          },
          [key, get](const RunConfig& c, json& out) { out[key] = get(const_cast<RunConfig&>(c)); }};
}

template <class E>
Field choice(std::string key, std::vector<std::pair<std::string, E>> names, std::function<E&(RunConfig&)> get) {
  return {key,
          [key, names, get](RunConfig& c, const json& v) {
            if (!v.is_string()) bad(key, "expected a string");
            for (const auto& [n, e] : names)
              if (n == v.get<std::string>()) {
                get(c) = e;
                return;
              }
            std::string opts;
            for (const auto& [n, e] : names) opts += (opts.empty() ? "" : ", ") + n;
            bad(key, "unknown value '" + v.get<std::string>() + "' (expected one of " + opts + ")");
          },
          [key, names, get](const RunConfig& c, json& out) {
            for (const auto& [n, e] : names)
              if (e == get(const_cast<RunConfig&>(c))) out[key] = n;
          }};
}

#define R(name, expr) real(name, [](RunConfig& c) -> double& { return expr; })
#define N(name, expr) count(name, [](RunConfig& c) -> auto& { return expr; })
#define B(name, expr) flag(name, [](RunConfig& c) -> bool& { return expr; })

const std::vector<Field>& fields() {
  static const std::vector<Field> f = [] {
    std::vector<Field> v{
        // training
        R("lambda1", c.train.lambda1), R("lambda2", c.train.lambda2), R("lambda_c", c.train.lambda_c),
        R("gamma", c.train.gamma), R("alpha", c.train.alpha), R("beta_factor", c.train.beta_factor),
        B("reloss", c.train.reloss), R("th", c.train.th), B("detach_boxes", c.train.detach_boxes),
        R("focal_gamma", c.train.focal_gamma), R("focal_alpha", c.train.focal_alpha),
        N("atss_topk", c.train.atss_topk), N("batch", c.train.batch), N("legacy_epochs", c.train.legacy_epochs),
        N("cycle_epochs", c.train.cycle_epochs), N("steps_per_epoch", c.train.steps_per_epoch),
        R("lr_start", c.train.lr_start), R("lr_end", c.train.lr_end), R("momentum", c.train.momentum),
        R("grad_clip", c.train.grad_clip), N("n_search", c.train.n_search), N("frame_gap", c.train.frame_gap),
        R("pseudo_jitter", c.train.pseudo_jitter), R("template_jitter", c.train.template_jitter),
        R("shift_max", c.train.shift_max), R("scale_min", c.train.scale_min), R("scale_max", c.train.scale_max),
        R("context_amount", c.train.context_amount), B("cpt_residual", c.train.cpt.residual),
        N("seed", c.train.seed), N("eval_seed", c.train.eval_seed),
        N("n_train_sequences", c.train.n_train_sequences), N("n_eval_sequences", c.train.n_eval_sequences),
        N("eval_frames", c.train.eval_frames), N("threads", c.train.threads),
        // scene
        N("image_size", c.scene.image_size), N("n_frames", c.scene.n_frames), R("min_target", c.scene.min_target),
        R("max_target", c.scene.max_target), R("max_aspect", c.scene.max_aspect), R("max_speed", c.scene.max_speed),
        R("max_scale_step", c.scene.max_scale_step), N("n_distractors", c.scene.n_distractors),
        R("pixel_noise", c.scene.pixel_noise),
        // network
        N("channels", c.net.channels), N("template_size", c.net.template_size), N("search_size", c.net.search_size),
        N("stride", c.net.stride), R("anchor_scale", c.net.anchor_scale),
        // tracker
        R("lambda_m", c.tracker.lambda_m), B("use_memory", c.tracker.use_memory),
        N("memory_capacity", c.tracker.memory_capacity), N("hidden_interval", c.tracker.hidden_interval),
        R("online_th_factor", c.tracker.online_th_factor), R("window_influence", c.tracker.window_influence),
        R("size_lr", c.tracker.size_lr),
        // harness
        N("gen_sequences", c.gen_sequences),
        text("checkpoint", [](RunConfig& c) -> std::string& { return c.checkpoint; }),
        text("results", [](RunConfig& c) -> std::string& { return c.results; }),
    };
    v.push_back(choice<CptTerms>("cpt_terms",
                                 {{"lt_st", CptTerms::LongShort}, {"lt", CptTerms::LongOnly}, {"st", CptTerms::ShortOnly}},
                                 [](RunConfig& c) -> CptTerms& { return c.train.cpt.terms; }));
    v.push_back(choice<AttentionAxis>("attention_axis",
                                      {{"search", AttentionAxis::Search}, {"template", AttentionAxis::Template}},
                                      [](RunConfig& c) -> AttentionAxis& { return c.train.cpt.axis; }));
    v.push_back({"ratios",
                 [](RunConfig& c, const json& j) {
                   if (!j.is_array() || j.empty()) bad("ratios", "expected a non-empty array of numbers");
                   c.net.ratios.clear();
                   for (const auto& r : j) {
                     if (!r.is_number() || !(r.get<double>() > 0)) bad("ratios", "every ratio must be a positive number");
                     c.net.ratios.push_back(r.get<double>());
                   }
                 },
                 [](const RunConfig& c, json& out) { out["ratios"] = c.net.ratios; }});
    v.push_back({"study_seeds",
                 [](RunConfig& c, const json& j) {
                   if (!j.is_array() || j.empty()) bad("study_seeds", "expected a non-empty array of integers");
                   c.study_seeds.clear();
                   for (const auto& s : j) {
                     if (!s.is_number_unsigned()) bad("study_seeds", "seeds must be non-negative integers");
                     c.study_seeds.push_back(s.get<std::uint64_t>());
                   }
                 },
                 [](const RunConfig& c, json& out) { out["study_seeds"] = c.study_seeds; }});
    return v;
  }();
  return f;
}

#undef R
#undef N
#undef B

}  // namespace

std::vector<std::string> config_keys() {
  std::vector<std::string> k;
  for (const auto& f : fields()) k.push_back(f.key);
  return k;
}

void validate(const RunConfig& c) {
  validate(c.train);
  validate_scene_spec(c.scene);
  const auto& n = c.net;
  if (n.channels == 0) throw ConfigError("config key 'channels': must be > 0");
  if (n.stride == 0 || n.template_size % n.stride || n.search_size % n.stride)
    throw ConfigError("config key 'stride': template_size and search_size must be multiples of it");
  if (n.search_size <= n.template_size) throw ConfigError("config key 'search_size': must exceed template_size");
  if (!(n.anchor_scale > 0)) throw ConfigError("config key 'anchor_scale': must be > 0");
  const auto& t = c.tracker;
  if (t.lambda_m < 0 || t.lambda_m > 1) throw ConfigError("config key 'lambda_m': must be in [0, 1]");
  if (t.memory_capacity < 1) throw ConfigError("config key 'memory_capacity': must be >= 1");
  if (t.online_th_factor < 0 || t.online_th_factor > 1)
    throw ConfigError("config key 'online_th_factor': must be in [0, 1]");
  if (t.window_influence < 0 || t.window_influence > 1)
    throw ConfigError("config key 'window_influence': must be in [0, 1]");
  if (t.size_lr < 0 || t.size_lr > 1) throw ConfigError("config key 'size_lr': must be in [0, 1]");
  if (c.study_seeds.empty()) throw ConfigError("config key 'study_seeds': must not be empty");
  if (1 + c.train.n_search * c.train.frame_gap > 1000)
    throw ConfigError("config keys 'n_search'/'frame_gap': palindrome span too long");
}

RunConfig parse_config(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!doc.is_object()) throw ConfigError("config must be a JSON object");
  RunConfig c;
  for (const auto& [key, value] : doc.items()) {
    const Field* f = nullptr;
    for (const auto& cand : fields())
      if (cand.key == key) f = &cand;
    if (!f) throw ConfigError("unknown config key '" + key + "'");
    f->read(c, value);
  }
  validate(c);
  return c;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str());
}

std::string config_to_json(const RunConfig& c) {
  json out = json::object();
  for (const auto& f : fields()) f.write(c, out);
  return out.dump(2);
}

TrackerConfig tracker_config(const RunConfig& c) {
  TrackerConfig t = c.tracker;
  t.cpt = c.train.cpt;
  t.context_amount = c.train.context_amount;
  return t;
}

}  // namespace ulast
