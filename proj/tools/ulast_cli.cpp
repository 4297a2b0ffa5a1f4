// Command-line front end. Talks to the library only through ulast.h.

#include <CLI11.hpp>
#include <cstdint>
#include <cstdio>
#include <string>

#include "ulast/ulast.h"

namespace {

struct Args {
  std::string config;
  std::string out = "out";
  std::uint64_t seed = 0;
  bool seed_set = false;
  std::string study;
};

int report(int status, const char* what) {
  if (status != ULAST_OK)
    std::fprintf(stderr, "ulast %s: %s: %s\n", what, ulast_status_name(status), ulast_last_error());
  return status == ULAST_OK ? 0 : 1;
}

// Owning wrappers so early returns release handles.
struct Config {
  ulast_config* h = nullptr;
  ~Config() { ulast_config_free(h); }
};
struct Model {
  ulast_model* h = nullptr;
  ~Model() { ulast_model_free(h); }
};

int load(const Args& a, Config& c) {
  const int s = a.config.empty() ? ulast_config_default(&c.h) : ulast_config_load(a.config.c_str(), &c.h);
  if (s != ULAST_OK) return report(s, "config");
  if (a.seed_set) ulast_config_set_seed(c.h, a.seed);
  return 0;
}

int with_model(const Args& a, const char* what, int (*fn)(ulast_model*, const ulast_config*, const char*)) {
  Config c;
  if (int rc = load(a, c)) return rc;
  Model m;
  if (int rc = report(ulast_model_create(c.h, &m.h), what)) return rc;
  return report(fn(m.h, c.h, a.out.c_str()), what);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ulast: unsupervised Siamese tracking on synthetic video"};
  app.require_subcommand(1);
  Args a;
  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", a.config, "JSON config file (defaults when omitted)")->check(CLI::ExistingFile);
    sub->add_option("--out", a.out, "output directory")->capture_default_str();
    sub->add_option_function<std::uint64_t>("--seed", [&](const std::uint64_t& s) {
      a.seed = s;
      a.seed_set = true;
    }, "override the training seed (and study seeds)");
  };
  auto* gen = app.add_subcommand("gen-data", "export synthetic sequences as PPM frames");
  auto* tr = app.add_subcommand("train", "train a model; writes checkpoint and logs");
  auto* tk = app.add_subcommand("track", "track the held-out sequences with a checkpoint");
  auto* ev = app.add_subcommand("eval", "score a results.jsonl file");
  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient suites");
  auto* ab = app.add_subcommand("ablate", "run a multi-arm study");
  for (auto* s : {gen, tr, tk, ev, gc, ab}) common(s);
  ab->add_option("--study", a.study, "detach | residual | lt_st | threshold | reloss | misalignment")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  if (gen->parsed()) {
    Config c;
    if (int rc = load(a, c)) return rc;
    return report(ulast_generate_data(c.h, a.out.c_str()), "gen-data");
  }
  if (tr->parsed()) return with_model(a, "train", ulast_train);
  if (tk->parsed()) return with_model(a, "track", ulast_track);
  if (ev->parsed()) {
    Config c;
    if (int rc = load(a, c)) return rc;
    double iou = 0, auc = 0, prec = 0;
    if (int rc = report(ulast_evaluate(c.h, nullptr, a.out.c_str(), &iou, &auc, &prec), "eval")) return rc;
    std::printf("mean_iou %.4f  success_auc %.4f  precision %.4f\n", iou, auc, prec);
    return 0;
  }
  if (gc->parsed()) {
    int pass = 0;
    if (int rc = report(ulast_gradcheck(a.out.c_str(), a.seed_set ? a.seed : 1, &pass), "gradcheck")) return rc;
    std::printf("gradcheck %s (details in %s/gradcheck.json)\n", pass ? "passed" : "FAILED", a.out.c_str());
    return pass ? 0 : 1;
  }
  if (ab->parsed()) {
    Config c;
    if (int rc = load(a, c)) return rc;
    return report(ulast_run_study(c.h, a.study.c_str(), a.out.c_str()), "ablate");
  }
  return 2;
}
