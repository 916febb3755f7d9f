// sizefit: command-line front end for dataset generation, training,
// evaluation, geometry utilities and the inference server.
//
// Exit codes: 0 ok, 1 usage, 2 data/validation, 3 numeric failure.

#include <atomic>
#include <chrono>
#include <csignal>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "sizefit/errors.hpp"
#include "sizefit/geometry.hpp"
#include "sizefit/gradcheck.hpp"
#include "sizefit/image_io.hpp"
#include "sizefit/metrics.hpp"
#include "sizefit/pipeline.hpp"
#include "sizefit/service.hpp"
#include "sizefit/synthdata.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace sizefit;

namespace {

enum Exit { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3 };

std::optional<std::uint64_t> env_seed() {
  const char* s = std::getenv("SIZEFIT_SEED");
  if (!s || !*s) return std::nullopt;
  try {
    std::size_t used = 0;
    const auto v = std::stoull(s, &used);
    if (used != std::strlen(s)) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw UsageError(std::string("SIZEFIT_SEED must be a non-negative integer (got '") + s + "')");
  }
}

std::string fmt(double v, int precision = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(precision) << v;
  return os.str();
}

metrics::SemMode parse_mode(const std::string& s) {
  if (s == "soft") return metrics::SemMode::soft;
  if (s == "binary") return metrics::SemMode::binary;
  throw UsageError("--mode must be soft or binary");
}

// Flags shared by train and ablate that override the config file.
struct TrainFlags {
  std::string config, data, out;
  std::optional<int> epochs, batch_size, workers, max_train_pairs;
  std::optional<long> max_steps;
  std::optional<double> lr;
  std::optional<std::uint64_t> seed;
  bool no_adversarial = false;
  bool f32 = false;

  void add(CLI::App* cmd) {
    cmd->add_option("--config", config, "TrainConfig JSON file")->check(CLI::ExistingFile);
    cmd->add_option("--data", data, "dataset root (overrides dataset_root)");
    cmd->add_option("--out", out, "output directory (overrides output_dir)");
    cmd->add_option("--epochs", epochs);
    cmd->add_option("--batch-size", batch_size);
    cmd->add_option("--lr", lr);
    cmd->add_option("--workers", workers, "data-parallel worker threads");
    cmd->add_option("--max-steps", max_steps, "stop after this many optimizer steps");
    cmd->add_option("--max-train-pairs", max_train_pairs);
    cmd->add_option("--seed", seed, "overrides SIZEFIT_SEED and the config seed");
    cmd->add_flag("--no-adversarial", no_adversarial, "drop the adversarial loss term");
    cmd->add_flag("--f32", f32, "run the GEMMs in single precision");
  }

  pipeline::TrainConfig resolve() const {
    pipeline::TrainConfig c = config.empty() ? pipeline::TrainConfig{} : pipeline::load_train_config(config);
    if (!data.empty()) c.dataset_root = data;
    if (!out.empty()) c.output_dir = out;
    if (epochs) c.epochs = *epochs;
    if (batch_size) c.batch_size = *batch_size;
    if (lr) c.optimizer.lr = *lr;
    if (workers) c.workers = *workers;
    if (max_steps) c.max_steps = *max_steps;
    if (max_train_pairs) c.max_train_pairs = *max_train_pairs;
    if (auto e = env_seed()) c.seed = *e;
    if (seed) c.seed = *seed;
    if (no_adversarial) c.loss.use_adversarial = false;
    if (f32) c.f32_compute = true;
    pipeline::validate(c);
    return c;
  }
};

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

json read_json_file(const fs::path& p) {
  std::ifstream f(p);
  if (!f) throw DataError("cannot read " + p.string());
  try {
    return json::parse(f);
  } catch (const json::exception& e) {
    throw DataError(p.string() + " is not valid JSON: " + e.what());
  }
}

std::vector<geometry::KeypointSet> read_sequence(const fs::path& p) {
  json j = read_json_file(p);
  if (j.is_object() && j.contains("frames")) j = j["frames"];
  if (!j.is_array()) throw DataError(p.string() + ": expected an array of keypoint sets or {\"frames\": [...]}");
  std::vector<geometry::KeypointSet> seq;
  for (const auto& f : j) seq.push_back(geometry::keypoints_from_json(f));
  return seq;
}

void print_eval(const pipeline::EvalReport& r) {
  std::cout << r.split << " (" << r.pairs.size() << " pairs)\n"
            << "  SEM(x100) model    " << fmt(100 * r.model.sem.mean) << " +- " << fmt(100 * r.model.sem.stddev)
            << "  (t- " << fmt(100 * r.model.t_minus.mean) << ", s- " << fmt(100 * r.model.s_minus.mean) << ")\n"
            << "  SEM(x100) identity " << fmt(100 * r.identity.sem.mean) << " +- "
            << fmt(100 * r.identity.sem.stddev) << "\n"
            << "  ratio              " << fmt(r.sem_ratio()) << "\n"
            << "  IoU model " << fmt(r.iou_model.mean) << ", identity " << fmt(r.iou_identity.mean) << "\n";
}

std::atomic<bool> g_interrupted{false};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Size-variable garment mask deformation toolkit"};
  app.require_subcommand(1, 1);
  app.fallthrough();
  bool as_json = false;
  app.add_flag("--json", as_json, "machine-readable JSON on stdout");

  // generate
  auto* gen = app.add_subcommand("generate", "render the synthetic paired dataset");
  std::string gen_out, gen_config;
  synth::DatasetConfig dc;
  std::optional<std::uint64_t> gen_seed;
  gen->add_option("--out", gen_out, "dataset root")->required();
  gen->add_option("--config", gen_config, "DatasetConfig JSON file")->check(CLI::ExistingFile);
  gen->add_option("--seed", gen_seed);
  gen->add_option("--bodies", dc.n_bodies);
  gen->add_option("--poses", dc.n_poses);
  gen->add_option("--garments", dc.n_garments);
  gen->add_option("--sizes", dc.sizes_per_garment, "first n of S, M, L, XL");
  gen->add_option("--held-out-bodies", dc.held_out_bodies);
  gen->add_option("--held-out-garments", dc.held_out_garments);
  gen->add_option("--val-fraction", dc.val_fraction);
  gen->add_option("--jitter", dc.jitter, "pose jitter between reference and try-on renders");

  // train
  auto* tr = app.add_subcommand("train", "train the mask deformation network");
  TrainFlags train_flags;
  train_flags.add(tr);

  // eval
  auto* ev = app.add_subcommand("eval", "score a checkpoint and the identity baseline");
  std::string ev_ckpt, ev_data = "data", ev_mode = "soft", ev_jsonl;
  std::string ev_splits = "test_new_person,test_new_clothes";
  int ev_workers = 1;
  ev->add_option("--checkpoint", ev_ckpt)->required()->check(CLI::ExistingFile);
  ev->add_option("--data", ev_data, "dataset root");
  ev->add_option("--split", ev_splits, "comma-separated split names");
  ev->add_option("--mode", ev_mode, "soft or binary");
  ev->add_option("--workers", ev_workers);
  ev->add_option("--jsonl", ev_jsonl, "write one SemReport per pair plus aggregates as JSON lines");

  // sem
  auto* sm = app.add_subcommand("sem", "size evaluation metric for one prediction");
  std::string sm_pred, sm_gt, sm_ppred, sm_pgt, sm_mode = "soft";
  sm->add_option("--pred", sm_pred)->required()->check(CLI::ExistingFile);
  sm->add_option("--gt", sm_gt)->required()->check(CLI::ExistingFile);
  sm->add_option("--parts-pred", sm_ppred)->required()->check(CLI::ExistingFile);
  sm->add_option("--parts-gt", sm_pgt)->required()->check(CLI::ExistingFile);
  sm->add_option("--mode", sm_mode, "soft or binary");

  // warp
  auto* wp = app.add_subcommand("warp", "TPS-warp a garment texture into a target mask");
  std::string wp_cloth, wp_cmask, wp_tmask, wp_out, wp_person;
  int wp_ctrl = 16;
  wp->add_option("--cloth", wp_cloth, "RGB texture")->required()->check(CLI::ExistingFile);
  wp->add_option("--cloth-mask", wp_cmask)->required()->check(CLI::ExistingFile);
  wp->add_option("--target-mask", wp_tmask)->required()->check(CLI::ExistingFile);
  wp->add_option("--person", wp_person, "composite onto this RGB image")->check(CLI::ExistingFile);
  wp->add_option("--out", wp_out)->required();
  wp->add_option("--ctrl", wp_ctrl, "boundary control points");

  // match
  auto* mt = app.add_subcommand("match", "posture matching between two keypoint sequences");
  std::string mt_a, mt_b;
  mt->add_option("--seq-a", mt_a)->required()->check(CLI::ExistingFile);
  mt->add_option("--seq-b", mt_b)->required()->check(CLI::ExistingFile);

  // ablate
  auto* ab = app.add_subcommand("ablate", "train and score ablation variants");
  TrainFlags ablate_flags;
  ablate_flags.add(ab);
  std::string ab_variants = "full,no_mr,no_rmdn", ab_seeds = "1,2,3", ab_splits = "test_new_person,test_new_clothes";
  std::string ab_report;
  ab->add_option("--variants", ab_variants, "comma-separated variant names");
  ab->add_option("--seeds", ab_seeds, "comma-separated seeds");
  ab->add_option("--splits", ab_splits);
  ab->add_option("--report", ab_report, "write the full table as JSON");

  // serve
  auto* sv = app.add_subcommand("serve", "HTTP inference server for the size explorer");
  std::string sv_ckpt, sv_gallery, sv_static, sv_host = "127.0.0.1", sv_splits;
  int sv_port = 8080;
  std::size_t sv_limit = 0;
  sv->add_option("--checkpoint", sv_ckpt)->required()->check(CLI::ExistingFile);
  sv->add_option("--gallery", sv_gallery, "dataset root holding the sample gallery")->required();
  sv->add_option("--gallery-splits", sv_splits, "comma-separated splits (default: all)");
  sv->add_option("--gallery-limit", sv_limit, "keep the first n samples");
  sv->add_option("--port", sv_port);
  sv->add_option("--host", sv_host);
  sv->add_option("--static", sv_static, "directory served under /")->check(CLI::ExistingDirectory);

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "finite-difference check of every op, loss and network");
  gradcheck::Options gopt;
  double tolerance = 1e-4;
  gc->add_option("--instances", gopt.instances_per_case, "random instances per case");
  gc->add_option("--seed", gopt.seed);
  gc->add_option("--tolerance", tolerance, "maximum relative error");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*gen) {
      if (!gen_config.empty()) {
        const synth::DatasetConfig file = synth::dataset_config_from_json(read_json_file(gen_config));
        // Flags given explicitly still win over the file.
        synth::DatasetConfig merged = file;
        for (const auto* opt : gen->get_options()) {
          if (opt->count() == 0) continue;
          const std::string n = opt->get_name();
          if (n == "--bodies") merged.n_bodies = dc.n_bodies;
          if (n == "--poses") merged.n_poses = dc.n_poses;
          if (n == "--garments") merged.n_garments = dc.n_garments;
          if (n == "--sizes") merged.sizes_per_garment = dc.sizes_per_garment;
          if (n == "--held-out-bodies") merged.held_out_bodies = dc.held_out_bodies;
          if (n == "--held-out-garments") merged.held_out_garments = dc.held_out_garments;
          if (n == "--val-fraction") merged.val_fraction = dc.val_fraction;
          if (n == "--jitter") merged.jitter = dc.jitter;
        }
        dc = merged;
      }
      if (auto e = env_seed()) dc.seed = *e;
      if (gen_seed) dc.seed = *gen_seed;
      const json manifest = synth::build_dataset(dc, gen_out);
      if (as_json) {
        std::cout << json{{"root", gen_out}, {"splits", manifest["splits"]}, {"config", manifest["config"]}}.dump()
                  << "\n";
      } else {
        std::cout << "wrote " << manifest["samples"].size() << " pairs to " << gen_out << "\n";
        for (const auto& [split, n] : manifest["splits"].items()) std::cout << "  " << split << ": " << n << "\n";
      }
      return kOk;
    }

    if (*tr) {
      const pipeline::TrainConfig cfg = train_flags.resolve();
      const auto result = pipeline::train(cfg, [&](const pipeline::EpochLog& e) {
        std::cerr << "epoch " << e.epoch << " step " << e.step << " loss " << fmt(e.train_loss) << " (mask "
                  << fmt(e.train_mask) << ", residual " << fmt(e.train_residual) << ", adv "
                  << fmt(e.train_adversarial) << ")";
        if (e.val_sem) std::cerr << " val SEM(x100) " << fmt(100 * *e.val_sem);
        std::cerr << " " << fmt(e.seconds, 1) << "s\n";
      });
      json out = {{"epochs", result.log.size()},
                  {"steps", result.best.step},
                  {"final_loss", result.log.empty() ? json(nullptr) : json(result.log.back().train_loss)},
                  {"best_val_sem", result.best_val_sem ? json(*result.best_val_sem) : json(nullptr)},
                  {"config_hash", result.best.hash()}};
      if (!cfg.output_dir.empty()) {
        out["best_checkpoint"] = (fs::path(cfg.output_dir) / "best.ckpt").string();
        out["last_checkpoint"] = (fs::path(cfg.output_dir) / "last.ckpt").string();
      }
      if (as_json) {
        std::cout << out.dump() << "\n";
      } else {
        std::cout << "trained " << out["epochs"] << " epochs";
        if (result.best_val_sem) std::cout << ", best val SEM(x100) " << fmt(100 * *result.best_val_sem);
        if (!cfg.output_dir.empty()) std::cout << ", checkpoints in " << cfg.output_dir;
        std::cout << "\n";
      }
      return kOk;
    }

    if (*ev) {
      const auto mode = parse_mode(ev_mode);
      const auto model = pipeline::load_model(ev_ckpt);
      json reports = json::array();
      std::ofstream jsonl;
      if (!ev_jsonl.empty()) {
        jsonl.open(ev_jsonl);
        if (!jsonl) throw DataError("cannot write " + ev_jsonl);
      }
      for (const auto& split : split_list(ev_splits)) {
        const auto r = pipeline::evaluate(model, ev_data, split, mode, ev_workers);
        if (jsonl.is_open()) {
          for (const auto& p : r.pairs)
            jsonl << json{{"split", split}, {"pair_id", p.pair_id}, {"model", metrics::to_json(p.model)},
                          {"identity", metrics::to_json(p.identity)}, {"iou_model", p.iou_model},
                          {"iou_identity", p.iou_identity}}
                         .dump()
                  << "\n";
          jsonl << json{{"split", split}, {"aggregate", pipeline::to_json(r)}}.dump() << "\n";
        }
        if (as_json)
          reports.push_back(pipeline::to_json(r));
        else
          print_eval(r);
      }
      if (as_json) std::cout << json{{"checkpoint", ev_ckpt}, {"reports", reports}}.dump() << "\n";
      return kOk;
    }

    if (*sm) {
      const auto mode = parse_mode(sm_mode);
      const Mask pred = io::image_to_mask(io::read_image(sm_pred));
      const Mask gt = io::image_to_mask(io::read_image(sm_gt));
      const PartLabelMap pp = io::image_to_parts(io::read_image(sm_ppred));
      const PartLabelMap pg = io::image_to_parts(io::read_image(sm_pgt));
      const auto r = metrics::sem(pred, pp, gt, pg, mode);
      if (as_json)
        std::cout << metrics::to_json(r).dump() << "\n";
      else
        std::cout << "SEM(x100) " << fmt(100 * r.sem) << "  t- " << fmt(r.t_minus, 6) << "  s- " << fmt(r.s_minus, 6)
                  << "\n";
      return kOk;
    }

    if (*wp) {
      const auto cloth = io::rgb_to_tensor(io::read_image(wp_cloth));
      const Mask cmask = io::image_to_mask(io::read_image(wp_cmask));
      const Mask tmask = io::image_to_mask(io::read_image(wp_tmask));
      tensor::Tensor out = geometry::tps_warp_cloth(cloth, cmask, tmask, wp_ctrl);
      if (!wp_person.empty()) out = composite_tryon(io::rgb_to_tensor(io::read_image(wp_person)), out, tmask);
      io::write_image(wp_out, io::tensor_to_rgb(out));
      if (as_json)
        std::cout << json{{"out", wp_out}, {"control_points", wp_ctrl}}.dump() << "\n";
      else
        std::cout << "wrote " << wp_out << "\n";
      return kOk;
    }

    if (*mt) {
      const auto a = read_sequence(mt_a), b = read_sequence(mt_b);
      const auto m = geometry::match_frames(a, b);
      json h = nullptr;
      std::string h_error;
      try {
        const auto H = geometry::estimate_homography(a[m.index_a], b[m.index_b]);
        h = H.matrix();
      } catch (const DataError& e) {
        h_error = e.what();
      }
      if (as_json) {
        json out = {{"index_a", m.index_a}, {"index_b", m.index_b}, {"distance", m.distance}, {"homography", h}};
        if (!h_error.empty()) out["homography_error"] = h_error;
        std::cout << out.dump() << "\n";
      } else {
        std::cout << "frames " << m.index_a << " <-> " << m.index_b << ", distance " << fmt(m.distance, 6) << "\n";
        if (h.is_null())
          std::cout << "no homography: " << h_error << "\n";
        else
          std::cout << "homography " << h.dump() << "\n";
      }
      return kOk;
    }

    if (*ab) {
      const pipeline::TrainConfig base = ablate_flags.resolve();
      std::vector<pipeline::Variant> variants;
      for (const auto& n : split_list(ab_variants)) variants.push_back(pipeline::find_variant(n));
      std::vector<std::uint64_t> seeds;
      for (const auto& s : split_list(ab_seeds)) {
        try {
          seeds.push_back(std::stoull(s));
        } catch (const std::exception&) {
          throw UsageError("--seeds must be comma-separated integers");
        }
      }
      const auto rows = pipeline::run_ablation_matrix(base, variants, seeds, split_list(ab_splits),
                                                      [](const std::string& s) { std::cerr << s << "\n"; });
      const json table = pipeline::to_json(rows);
      if (!ab_report.empty()) std::ofstream(ab_report) << table.dump(2) << "\n";
      if (as_json) {
        std::cout << table.dump() << "\n";
      } else {
        std::cout << std::left << std::setw(18) << "variant" << std::setw(6) << "seed";
        for (const auto& s : split_list(ab_splits)) std::cout << std::setw(22) << s;
        std::cout << "\n";
        for (const auto& r : rows) {
          std::cout << std::setw(18) << r.variant << std::setw(6) << r.seed;
          for (const auto& e : r.reports) std::cout << std::setw(22) << fmt(100 * e.model.sem.mean);
          std::cout << "\n";
        }
        std::cout << "(SEM x100, soft mode)\n";
      }
      return kOk;
    }

    if (*sv) {
      auto model = pipeline::load_model(sv_ckpt);
      auto gallery = service::load_gallery(sv_gallery, split_list(sv_splits), sv_limit);
      const std::size_t n = gallery.size();
      const service::Service svc(std::move(model), std::move(gallery));
      service::HttpServer http(svc, {sv_host, sv_port, sv_static});
      const int port = http.start();
      std::signal(SIGINT, [](int) { g_interrupted = true; });
      std::signal(SIGTERM, [](int) { g_interrupted = true; });
      std::cerr << "serving " << n << " samples on http://" << sv_host << ":" << port << "\n";
      while (!g_interrupted) std::this_thread::sleep_for(std::chrono::milliseconds(100));
      http.stop();
      return kOk;
    }

    if (*gc) {
      const auto report = gradcheck::run_suite(gopt);
      const bool ok = report.passed(tolerance);
      if (as_json) {
        json j = gradcheck::to_json(report);
        j["tolerance"] = tolerance;
        j["passed"] = ok;
        std::cout << j.dump() << "\n";
      } else {
        for (const auto& c : report.cases)
          std::cout << std::left << std::setw(32) << c.name << std::scientific << std::setprecision(2)
                    << c.max_rel_error << std::defaultfloat << "  (" << c.coords << " coords)\n";
        std::cout << report.instances << " instances, max relative error " << std::scientific << std::setprecision(3)
                  << report.max_rel_error << std::defaultfloat << ", " << fmt(report.seconds, 1) << "s: "
                  << (ok ? "PASS" : "FAIL") << "\n";
      }
      return ok ? kOk : kNumeric;
    }
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kData;
  }
  return kUsage;
}
