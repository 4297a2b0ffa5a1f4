#include "ulast/ulast.h"

#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <map>
#include <memory>
#include <optional>
#include <string>

#include "ulast/checkpoint.hpp"
#include "ulast/config.hpp"
#include "ulast/error.hpp"
#include "ulast/experiments.hpp"

struct ulast_config {
  ulast::RunConfig cfg;
};

struct ulast_model {
  std::unique_ptr<ulast::Model> model;
};

struct ulast_tracker {
  ulast::Model* model = nullptr;
  std::unique_ptr<ulast::Tracker> tracker;
  std::optional<ulast::TrackerState> state;
};

namespace {

thread_local std::string g_error;

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

int fail(int status, const std::string& msg) {
  g_error = msg;
  return status;
}

// Maps exceptions to status codes.
template <class F>
int guarded(F&& f) {
  try {
    f();
    return ULAST_OK;
  } catch (const ulast::ConfigError& e) {
    return fail(ULAST_ERR_CONFIG, e.what());
  } catch (const ulast::ShapeError& e) {
    return fail(ULAST_ERR_SHAPE, e.what());
  } catch (const ulast::ContractError& e) {
    return fail(ULAST_ERR_CONTRACT, e.what());
  } catch (const ulast::RangeError& e) {
    return fail(ULAST_ERR_RANGE, e.what());
  } catch (const ulast::NumericError& e) {
    return fail(ULAST_ERR_NUMERIC, e.what());
  } catch (const ulast::TrainingError& e) {
    return fail(ULAST_ERR_TRAINING, e.what());
  } catch (const ulast::FormatError& e) {
    return fail(ULAST_ERR_FORMAT, e.what());
  } catch (const IoError& e) {
    return fail(ULAST_ERR_IO, e.what());
  } catch (const std::invalid_argument& e) {
    return fail(ULAST_ERR_ARGUMENT, e.what());
  } catch (const std::exception& e) {
    return fail(ULAST_ERR_INTERNAL, e.what());
  } catch (...) {
    return fail(ULAST_ERR_INTERNAL, "unknown error");
  }
}

std::filesystem::path prepare_dir(const char* dir) {
  std::filesystem::path p(dir);
  std::error_code ec;
  std::filesystem::create_directories(p, ec);
  if (ec) throw IoError("cannot create directory " + p.string() + ": " + ec.message());
  return p;
}

std::ofstream open_out(const std::filesystem::path& p) {
  std::ofstream os(p);
  if (!os) throw IoError("cannot write " + p.string());
  return os;
}

std::string metrics_json(const ulast::Metrics& m) {
  nlohmann::json j{{"mean_iou", m.mean_iou}, {"success_auc", m.success_auc}, {"precision", m.precision}};
  return j.dump(2);
}

ulast::Image make_image(const float* data, std::size_t c, std::size_t h, std::size_t w) {
  if (!data || c == 0 || h == 0 || w == 0) throw std::invalid_argument("empty image");
  ulast::Image img(c, h, w);
  std::copy(data, data + c * h * w, img.data.begin());
  return img;
}

#define NEED(ptr)                                                       \
  do {                                                                  \
    if (!(ptr)) return fail(ULAST_ERR_ARGUMENT, #ptr " must not be null"); \
  } while (0)

}  // namespace

extern "C" {

const char* ulast_last_error(void) { return g_error.c_str(); }

const char* ulast_status_name(int s) {
  switch (s) {
    case ULAST_OK: return "ok";
    case ULAST_ERR_ARGUMENT: return "argument error";
    case ULAST_ERR_CONFIG: return "config error";
    case ULAST_ERR_SHAPE: return "shape error";
    case ULAST_ERR_CONTRACT: return "contract error";
    case ULAST_ERR_RANGE: return "range error";
    case ULAST_ERR_NUMERIC: return "numeric error";
    case ULAST_ERR_TRAINING: return "training error";
    case ULAST_ERR_FORMAT: return "format error";
    case ULAST_ERR_IO: return "i/o error";
    default: return "internal error";
  }
}

const char* ulast_version(void) { return "0.1.0"; }

int ulast_config_default(ulast_config** out) {
  NEED(out);
  return guarded([&] { *out = new ulast_config{}; });
}

int ulast_config_load(const char* path, ulast_config** out) {
  NEED(path);
  NEED(out);
  return guarded([&] { *out = new ulast_config{ulast::load_config(path)}; });
}

int ulast_config_parse(const char* json_text, ulast_config** out) {
  NEED(json_text);
  NEED(out);
  return guarded([&] { *out = new ulast_config{ulast::parse_config(json_text)}; });
}

int ulast_config_set_seed(ulast_config* cfg, uint64_t seed) {
  NEED(cfg);
  cfg->cfg.train.seed = seed;
  cfg->cfg.study_seeds = {seed};
  return ULAST_OK;
}

int ulast_config_to_json(const ulast_config* cfg, char* buf, size_t cap, size_t* needed) {
  NEED(cfg);
  return guarded([&] {
    const std::string s = ulast::config_to_json(cfg->cfg);
    if (needed) *needed = s.size() + 1;
    if (buf && cap > 0) {
      const std::size_t n = std::min(cap - 1, s.size());
      std::copy(s.begin(), s.begin() + static_cast<long>(n), buf);
      buf[n] = '\0';
    }
  });
}

void ulast_config_free(ulast_config* cfg) { delete cfg; }

int ulast_model_create(const ulast_config* cfg, ulast_model** out) {
  NEED(cfg);
  NEED(out);
  return guarded([&] {
    auto m = std::make_unique<ulast::Model>(cfg->cfg.net, cfg->cfg.train.seed);
    if (!cfg->cfg.checkpoint.empty()) ulast::load_checkpoint(*m, cfg->cfg.checkpoint);
    *out = new ulast_model{std::move(m)};
  });
}

int ulast_model_load(const ulast_config* cfg, const char* path, ulast_model** out) {
  NEED(cfg);
  NEED(path);
  NEED(out);
  return guarded([&] {
    if (!std::filesystem::exists(path)) throw IoError(std::string("no such checkpoint: ") + path);
    auto m = std::make_unique<ulast::Model>(cfg->cfg.net, cfg->cfg.train.seed);
    ulast::load_checkpoint(*m, path);
    *out = new ulast_model{std::move(m)};
  });
}

int ulast_model_save(const ulast_model* model, const ulast_config* cfg, const char* path, uint64_t step) {
  NEED(model);
  NEED(path);
  return guarded([&] {
    ulast::CheckpointMeta meta{step, cfg ? ulast::config_to_json(cfg->cfg) : std::string()};
    ulast::save_checkpoint(*model->model, path, meta);
  });
}

int ulast_model_param_count(const ulast_model* model, size_t* out) {
  NEED(model);
  NEED(out);
  *out = model->model->params().scalar_count();
  return ULAST_OK;
}

void ulast_model_free(ulast_model* model) { delete model; }

int ulast_generate_data(const ulast_config* cfg, const char* out_dir) {
  NEED(cfg);
  NEED(out_dir);
  return guarded([&] {
    const auto dir = prepare_dir(out_dir);
    const auto& c = cfg->cfg;
    auto index = open_out(dir / "sequences.txt");
    for (std::size_t i = 0; i < c.gen_sequences; ++i) {
      const auto seq = ulast::generate_sequence(c.scene, ulast::mix_seed(c.train.seed, 0xda7a, i));
      ulast::export_sequence(seq, dir / seq.seq_id);
      index << seq.seq_id << ' ' << seq.seed << '\n';
    }
  });
}

int ulast_train(ulast_model* model, const ulast_config* cfg, const char* out_dir) {
  NEED(model);
  NEED(cfg);
  NEED(out_dir);
  return guarded([&] {
    const auto dir = prepare_dir(out_dir);
    const auto& c = cfg->cfg;
    auto step_log = open_out(dir / "train_log.txt");
    auto metrics = open_out(dir / "metrics.jsonl");
    ulast::TrainHooks hooks;
    hooks.step_log = &step_log;
    hooks.metrics_log = &metrics;
    hooks.evaluate_untrained = true;
    std::uint64_t last_step = 0;
    hooks.on_step = [&](std::size_t s) { last_step = s; };
    const std::string snapshot = ulast::config_to_json(c);
    try {
      ulast::train(*model->model, c.train, c.scene, ulast::tracker_config(c), hooks);
    } catch (const ulast::TrainingError&) {
      ulast::save_checkpoint(*model->model, dir / "model.ulst", {last_step, snapshot});
      throw;
    }
    ulast::save_checkpoint(*model->model, dir / "model.ulst", {last_step, snapshot});
  });
}

int ulast_track(ulast_model* model, const ulast_config* cfg, const char* out_dir) {
  NEED(model);
  NEED(cfg);
  NEED(out_dir);
  return guarded([&] {
    const auto dir = prepare_dir(out_dir);
    const auto& c = cfg->cfg;
    const ulast::Tracker tracker(*model->model, ulast::tracker_config(c));
    auto results = open_out(dir / "results.jsonl");
    std::vector<ulast::Box> pred, gt;
    for (const auto& seq : ulast::eval_sequences(c.scene, c.train)) {
      const auto run = ulast::run_sequence(tracker, seq);
      for (std::size_t f = 0; f < run.boxes.size(); ++f) {
        const auto& b = run.boxes[f];
        nlohmann::json j{{"seq", seq.seq_id}, {"frame", f + 1}, {"box", {b.x1, b.y1, b.x2, b.y2}}, {"score", run.scores[f]}};
        results << j.dump() << '\n';
      }
      pred.insert(pred.end(), run.boxes.begin() + 1, run.boxes.end());
      gt.insert(gt.end(), seq.gt_boxes.begin() + 1, seq.gt_boxes.end());
    }
    open_out(dir / "metrics.json") << metrics_json(ulast::evaluate(pred, gt)) << '\n';
  });
}

int ulast_evaluate(const ulast_config* cfg, const char* results_path, const char* out_dir, double* mean_iou,
                   double* success_auc, double* precision) {
  NEED(cfg);
  NEED(out_dir);
  return guarded([&] {
    std::string path = results_path ? results_path : cfg->cfg.results;
    if (path.empty()) path = (std::filesystem::path(out_dir) / "results.jsonl").string();
    std::ifstream is(path);
    if (!is) throw IoError("cannot read " + path);
    std::map<std::string, std::map<std::size_t, ulast::Box>> by_seq;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      if (line.empty()) continue;
      try {
        const auto j = nlohmann::json::parse(line);
        const auto& b = j.at("box");
        by_seq[j.at("seq").get<std::string>()][j.at("frame").get<std::size_t>()] =
            ulast::Box{b.at(0).get<double>(), b.at(1).get<double>(), b.at(2).get<double>(), b.at(3).get<double>()};
      } catch (const nlohmann::json::exception& e) {
        throw ulast::FormatError(std::string("results line ") + std::to_string(lineno) + ": " + e.what(), 0);
      }
    }
    std::vector<ulast::Box> pred, gt;
    for (const auto& seq : ulast::eval_sequences(cfg->cfg.scene, cfg->cfg.train)) {
      auto it = by_seq.find(seq.seq_id);
      if (it == by_seq.end()) throw ulast::ContractError("results missing sequence " + seq.seq_id);
      for (std::size_t f = 2; f <= seq.gt_boxes.size(); ++f) {
        auto fb = it->second.find(f);
        if (fb == it->second.end())
          throw ulast::ContractError("results missing frame " + std::to_string(f) + " of " + seq.seq_id);
        pred.push_back(fb->second);
        gt.push_back(seq.gt_boxes[f - 1]);
      }
    }
    const auto m = ulast::evaluate(pred, gt);
    open_out(prepare_dir(out_dir) / "metrics.json") << metrics_json(m) << '\n';
    if (mean_iou) *mean_iou = m.mean_iou;
    if (success_auc) *success_auc = m.success_auc;
    if (precision) *precision = m.precision;
  });
}

int ulast_gradcheck(const char* out_dir, uint64_t seed, int* all_pass) {
  NEED(out_dir);
  NEED(all_pass);
  return guarded([&] {
    const auto res = ulast::run_gradchecks(seed);
    nlohmann::json j = nlohmann::json::array();
    bool ok = true;
    for (const auto& r : res) {
      j.push_back({{"suite", r.name}, {"error", r.error}, {"tolerance", r.tolerance}, {"pass", r.pass}});
      ok = ok && r.pass;
    }
    open_out(prepare_dir(out_dir) / "gradcheck.json") << j.dump(2) << '\n';
    *all_pass = ok ? 1 : 0;
  });
}

int ulast_run_study(const ulast_config* cfg, const char* study, const char* out_dir) {
  NEED(cfg);
  NEED(study);
  NEED(out_dir);
  return guarded([&] {
    const auto dir = prepare_dir(out_dir);
    auto arms = open_out(dir / "arms.jsonl");
    const auto rep = ulast::run_study(cfg->cfg, study, [&](const ulast::ArmResult& r) {
      nlohmann::json j{{"arm", r.arm}, {"seed", r.seed}, {"mean_iou", r.mean_iou}, {"success_auc", r.success_auc}};
      arms << j.dump() << '\n' << std::flush;
    });
    open_out(dir / "report.json") << rep.to_json() << '\n';
    open_out(dir / "report.md") << rep.to_markdown();
  });
}

int ulast_tracker_create(ulast_model* model, const ulast_config* cfg, ulast_tracker** out) {
  NEED(model);
  NEED(cfg);
  NEED(out);
  return guarded([&] {
    auto t = std::make_unique<ulast_tracker>();
    t->model = model->model.get();
    t->tracker = std::make_unique<ulast::Tracker>(*t->model, ulast::tracker_config(cfg->cfg));
    *out = t.release();
  });
}

int ulast_tracker_init(ulast_tracker* tracker, const float* image, size_t channels, size_t height, size_t width,
                       const double box[4]) {
  NEED(tracker);
  NEED(image);
  NEED(box);
  return guarded([&] {
    tracker->state = tracker->tracker->init(make_image(image, channels, height, width),
                                            ulast::Box{box[0], box[1], box[2], box[3]});
  });
}

int ulast_tracker_track(ulast_tracker* tracker, const float* image, size_t channels, size_t height, size_t width,
                        double box_out[4], double* score_out) {
  NEED(tracker);
  NEED(image);
  NEED(box_out);
  if (!tracker->state) return fail(ULAST_ERR_CONTRACT, "tracker not initialised");
  return guarded([&] {
    const auto r = tracker->tracker->track_frame(*tracker->state, make_image(image, channels, height, width));
    box_out[0] = r.box.x1;
    box_out[1] = r.box.y1;
    box_out[2] = r.box.x2;
    box_out[3] = r.box.y2;
    if (score_out) *score_out = r.score;
  });
}

void ulast_tracker_free(ulast_tracker* tracker) { delete tracker; }

}  // extern "C"
