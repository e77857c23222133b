#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "ccd/checkpoint.hpp"
#include "ccd/common.hpp"
#include "ccd/config.hpp"
#include "ccd/datagen.hpp"
#include "ccd/gradcheck.hpp"
#include "ccd/probe.hpp"
#include "ccd/pseudolabel.hpp"
#include "ccd/trainer.hpp"

namespace fs = std::filesystem;
using namespace ccd;

namespace {

std::ofstream open_out(const fs::path& path, std::ios::openmode mode = std::ios::trunc) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | mode);
  if (!os) throw RuntimeError("cannot open for writing: " + path.string());
  return os;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

template <class T>
std::vector<T> parse_list(const std::string& text, const char* flag) {
  std::vector<T> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::istringstream is(item);
    T v{};
    if (!(is >> v) || !(is >> std::ws).eof()) throw ValidationError(std::string(flag) + ": bad list item '" + item + "'");
    out.push_back(v);
  }
  if (out.empty()) throw ValidationError(std::string(flag) + ": empty list");
  return out;
}

BinaryMask label_union(const GlyphSample& s) {
  if (s.gt_masks.empty()) return BinaryMask(s.image.height, s.image.width);
  return s.text_mask();
}

bool has_ground_truth(const DatasetReader& reader) {
  return reader.size() > 0 && !reader.record(0).mask.empty();
}

std::vector<ImageBuffer> read_images(const DatasetReader& reader) {
  std::vector<ImageBuffer> images;
  images.reserve(reader.size());
  for (std::size_t i = 0; i < reader.size(); ++i) images.push_back(reader.read_image(i));
  return images;
}

RunConfig config_from_checkpoint(const Checkpoint& ck) {
  RunConfig rc;
  if (!ck.run_config.empty()) rc.parse(ck.run_config, "checkpoint run_config");
  return rc;
}

// --- subcommands ---------------------------------------------------------

struct GenArgs {
  std::string out;
  std::size_t count = 0;
  std::uint64_t seed = 0;
  double touching = 0.0;
  std::string noise = "0";
};

int run_gen(const GenArgs& a) {
  DataGenConfig cfg;
  cfg.touching_probability = a.touching;
  const auto colon = a.noise.find(':');
  if (colon == std::string::npos) {
    cfg.min_noise = cfg.max_noise = parse_list<double>(a.noise, "--noise").at(0);
  } else {
    cfg.min_noise = parse_list<double>(a.noise.substr(0, colon), "--noise").at(0);
    cfg.max_noise = parse_list<double>(a.noise.substr(colon + 1), "--noise").at(0);
  }
  cfg.validate();
  const auto samples = generate_corpus(a.count, a.seed, cfg);
  write_dataset(samples, a.out);
  auto os = open_out(fs::path(a.out) / "gen_config.txt");
  os << "count = " << a.count << "\nseed = " << a.seed << "\ntouching = " << a.touching << "\nnoise = " << a.noise
     << "\n";
  std::cout << "wrote " << samples.size() << " samples to " << a.out << "\n";
  return 0;
}

struct PseudoArgs {
  std::string data, out, report;
};

int run_pseudolabel(const PseudoArgs& a) {
  const DatasetReader reader(a.data);
  const bool gt = has_ground_truth(reader);
  fs::create_directories(a.out);
  std::ofstream report;
  if (!a.report.empty()) {
    report = open_out(a.report);
    report << "id,gamma,inverted,iou_vs_gt\n";
  }
  double iou_sum = 0.0;
  for (std::size_t i = 0; i < reader.size(); ++i) {
    const auto& rec = reader.record(i);
    PolarityReport pr;
    const BinaryMask m = pseudo_label(reader.read_image(i), &pr);
    std::vector<std::uint8_t> px(m.data.size());
    for (std::size_t k = 0; k < px.size(); ++k) px[k] = m.data[k] ? 255 : 0;
    write_pgm_bytes(fs::path(a.out) / (rec.id + "_pl.pgm"), m.height, m.width, px);
    double iou = 0.0;
    if (gt) {
      iou = mask_iou(m, label_union(reader.read(i)));
      iou_sum += iou;
    }
    if (report.is_open()) {
      report << rec.id << ',' << pr.gamma << ',' << (pr.inverted ? 1 : 0) << ',' << (gt ? fmt(iou) : "") << '\n';
    }
  }
  std::cout << "pseudo-labelled " << reader.size() << " images";
  if (gt && reader.size() > 0) std::cout << ", mean IoU vs ground truth " << fmt(iou_sum / double(reader.size()));
  std::cout << "\n";
  return 0;
}

struct SearchArgs {
  std::string data, report, eps, min_samples, source = "gt";
  std::size_t workers = 1;
};

int run_cluster_search(const SearchArgs& a) {
  const auto eps = a.eps.empty() ? kDefaultEpsGrid : parse_list<double>(a.eps, "--eps");
  const auto ms = a.min_samples.empty() ? kDefaultMinSamplesGrid : parse_list<int>(a.min_samples, "--min-samples");
  if (a.source != "gt" && a.source != "pl") throw ValidationError("--source must be gt or pl");
  const auto samples = read_dataset(a.data);
  std::vector<SegmentationCase> cases;
  cases.reserve(samples.size());
  for (const auto& s : samples) {
    if (s.gt_masks.empty()) throw ValidationError("cluster-search needs ground-truth masks: " + a.data);
    cases.push_back({a.source == "gt" ? s.text_mask() : pseudo_label(s.image), s.gt_masks});
  }
  const auto result = grid_search(cases, eps, ms, a.workers);
  auto os = open_out(a.report);
  write_grid_csv(os, result);
  std::cout << "best eps = " << result.best.eps << ", min_samples = " << result.best.min_samples
            << ", mean IoU = " << fmt(result.best_iou) << "\n";
  return 0;
}

struct PretrainArgs {
  std::string data, config, out, log;
  long steps = -1;
  long seed = -1;
  long workers = -1;
};

int run_pretrain(const PretrainArgs& a) {
  RunConfig rc = RunConfig::from_file(a.config);
  if (a.steps >= 0) rc.set("steps", std::to_string(a.steps));
  if (a.seed >= 0) rc.set("seed", std::to_string(a.seed));
  if (a.workers >= 0) rc.set("workers", std::to_string(a.workers));
  const TrainConfig cfg = rc.train_config();
  std::cout << rc.dump() << std::flush;

  const DatasetReader reader(a.data);
  const auto images = read_images(reader);
  std::ofstream log;
  if (!a.log.empty()) log = open_out(a.log);
  const auto t0 = std::chrono::steady_clock::now();
  auto on_step = [&](const StepMetrics& m) {
    if (m.step % cfg.log_every != 0 && m.step != cfg.steps - 1) return;
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::fprintf(stderr, "step %ld/%ld l_dis %.4f l_seg %.4f std %.4g chars %zu (%.0fs)\n", m.step, cfg.steps,
                 m.l_dis, m.l_seg, m.teacher_std, m.chars, secs);
  };
  TrainState state = pretrain(images, cfg, log.is_open() ? &log : nullptr, on_step);

  Checkpoint ck;
  ck.cfg = cfg.model;
  ck.student = state.student;
  ck.teacher = state.teacher;
  ck.center.assign(state.center.data(), state.center.data() + state.center.size());
  ck.run_config = rc.dump();
  ck.step = state.step;
  save_checkpoint(ck, a.out);
  std::cout << "saved " << a.out << " after " << state.step << " steps\n";
  return 0;
}

struct ProbeArgs {
  std::string ckpt, data, report, encoder = "teacher";
  bool random_init = false;
  std::size_t test_count = 1000;
  int iterations = ProbeConfig{}.iterations;
  long seed = -1;
  std::size_t workers = 1;
};

int run_probe(const ProbeArgs& a) {
  const Checkpoint ck = load_checkpoint(a.ckpt);
  const RunConfig rc = config_from_checkpoint(ck);
  const std::uint64_t seed = a.seed >= 0 ? static_cast<std::uint64_t>(a.seed) : std::stoull(rc.get("seed"));

  std::string source;
  ParamStore<float> store;
  if (a.random_init) {
    source = "random_init";
    RunConfig init_rc = rc;
    init_rc.set("seed", std::to_string(seed));
    store = TrainState::init(init_rc.train_config()).student;  // the weights pretraining starts from
  } else if (a.encoder == "teacher") {
    if (!ck.teacher) throw ValidationError("checkpoint has no teacher tensors: " + a.ckpt);
    source = "teacher";
    store = *ck.teacher;
  } else if (a.encoder == "student") {
    source = "student";
    store = ck.student;
  } else {
    throw ValidationError("--encoder must be teacher or student");
  }

  const auto samples = read_dataset(a.data);
  if (samples.size() < 2) throw ValidationError("probe needs at least 2 samples");
  const std::size_t test_n = std::min(a.test_count, samples.size() / 3 == 0 ? 1 : samples.size() / 3);
  const std::vector<GlyphSample> train(samples.begin(), samples.end() - static_cast<long>(test_n));
  const std::vector<GlyphSample> test(samples.end() - static_cast<long>(test_n), samples.end());

  ProbeConfig pcfg;
  pcfg.iterations = a.iterations;
  const auto ftrain = extract_probe_features(ck.cfg, store, train, a.workers);
  const auto ftest = extract_probe_features(ck.cfg, store, test, a.workers);
  const ProbeResult r = fit_linear_probe(ftrain, ftest, pcfg);

  static constexpr const char* kHeader = "encoder,train_samples,test_samples,train_chars,test_chars,train_accuracy,test_accuracy";
  bool append = false;
  {
    std::ifstream is(a.report);
    std::string first;
    append = is && std::getline(is, first) && first == kHeader;
  }
  auto os = open_out(a.report, append ? std::ios::app : std::ios::trunc);
  if (!append) os << kHeader << '\n';
  os << source << ',' << train.size() << ',' << test.size() << ',' << r.train_count << ',' << r.test_count << ','
     << fmt(r.train_accuracy) << ',' << fmt(r.test_accuracy) << '\n';
  std::cout << source << " probe: train accuracy " << fmt(r.train_accuracy) << ", test accuracy "
            << fmt(r.test_accuracy) << " (" << r.test_count << " test characters)\n";
  return 0;
}

struct EvalArgs {
  std::string ckpt, data, report;
  std::size_t workers = 1;
};

int run_eval_seg(const EvalArgs& a) {
  const Checkpoint ck = load_checkpoint(a.ckpt);
  const DatasetReader reader(a.data);
  const bool gt = has_ground_truth(reader);
  const auto images = read_images(reader);
  const auto pred = predict_text_masks(ck.cfg, ck.student, images, a.workers);
  auto os = open_out(a.report);
  os << "id,seg_vs_pseudo,seg_vs_gt,pseudo_vs_gt\n";
  double s_pl = 0.0, s_gt = 0.0, pl_gt = 0.0;
  for (std::size_t i = 0; i < images.size(); ++i) {
    const BinaryMask pl = pseudo_label(images[i]);
    const double a1 = mask_iou(pred[i], pl);
    s_pl += a1;
    os << reader.record(i).id << ',' << fmt(a1);
    if (gt) {
      const BinaryMask g = label_union(reader.read(i));
      const double a2 = mask_iou(pred[i], g), a3 = mask_iou(pl, g);
      s_gt += a2;
      pl_gt += a3;
      os << ',' << fmt(a2) << ',' << fmt(a3) << '\n';
    } else {
      os << ",,\n";
    }
  }
  const double n = images.empty() ? 1.0 : double(images.size());
  os << "mean," << fmt(s_pl / n);
  if (gt) {
    os << ',' << fmt(s_gt / n) << ',' << fmt(pl_gt / n) << '\n';
  } else {
    os << ",,\n";
  }
  std::cout << "segmentation IoU vs pseudo-labels " << fmt(s_pl / n);
  if (gt) std::cout << ", vs ground truth " << fmt(s_gt / n) << " (pseudo-labels vs ground truth " << fmt(pl_gt / n) << ")";
  std::cout << "\n";
  return 0;
}

struct OverlayArgs {
  std::string ckpt, data, out;
  std::size_t count = 16;
  std::size_t workers = 1;
};

std::uint8_t cluster_level(std::size_t k) {
  static constexpr std::uint8_t kLevels[] = {255, 200, 150, 110, 230, 175, 130, 90};
  return kLevels[k % (sizeof kLevels)];
}

int run_overlay(const OverlayArgs& a) {
  const Checkpoint ck = load_checkpoint(a.ckpt);
  const RunConfig rc = config_from_checkpoint(ck);
  ClusterConfig cc;
  cc.eps = std::stod(rc.get("eps"));
  cc.min_samples = std::stoi(rc.get("min_samples"));
  cc.validate();
  const DatasetReader reader(a.data);
  std::vector<ImageBuffer> images;
  for (std::size_t i = 0; i < std::min(a.count, reader.size()); ++i) images.push_back(reader.read_image(i));
  const auto pred = predict_text_masks(ck.cfg, ck.student, images, a.workers);
  fs::create_directories(a.out);
  for (std::size_t i = 0; i < images.size(); ++i) {
    const auto& img = images[i];
    const ImageBuffer gray = to_grayscale(img);
    std::vector<std::uint8_t> seg(img.pixel_count()), clusters(img.pixel_count(), 0);
    for (std::size_t p = 0; p < seg.size(); ++p) {
      seg[p] = pred[i].data[p] ? 255 : static_cast<std::uint8_t>(std::lround(80.0 * gray.data[p]));
    }
    const CharMaskSet chars = char_masks_from_seg(pred[i], cc);
    for (std::size_t k = 0; k < chars.size(); ++k) {
      for (std::size_t p = 0; p < clusters.size(); ++p) {
        if (chars[k].data[p]) clusters[p] = cluster_level(k);
      }
    }
    const std::string id = reader.record(i).id;
    write_pgm(fs::path(a.out) / (id + "_input.pgm"), gray);
    write_pgm_bytes(fs::path(a.out) / (id + "_seg.pgm"), img.height, img.width, seg);
    write_pgm_bytes(fs::path(a.out) / (id + "_clusters.pgm"), img.height, img.width, clusters);
  }
  auto os = open_out(fs::path(a.out) / "overlay_config.txt");
  os << "ckpt = " << a.ckpt << "\ndata = " << a.data << "\ncount = " << images.size() << "\neps = " << cc.eps
     << "\nmin_samples = " << cc.min_samples << "\n";
  std::cout << "wrote overlays for " << images.size() << " images to " << a.out << "\n";
  return 0;
}

struct GradArgs {
  std::string config, zero_tensor;
  double tol = 1e-4;
};

int run_gradcheck(const GradArgs& a) {
  const RunConfig rc = RunConfig::from_file(a.config);
  GradCheckConfig cfg = rc.gradcheck_config();
  cfg.zero_tensor = a.zero_tensor;
  const GradCheckReport r = grad_check(cfg);
  for (const auto& t : r.tensors) {
    std::printf("%-40s %-10s probes %2d  max rel err %.3e\n", t.name.c_str(), role_name(t.role), t.probes,
                t.max_rel_error);
  }
  std::printf("max relative error %.3e over %d probes (tolerance %.1e)\n", r.max_rel_error, r.probes, a.tol);
  const auto bad = r.failing(a.tol);
  if (!bad.empty()) {
    std::printf("FAIL: %zu tensor(s) above tolerance\n", bad.size());
    return 2;
  }
  std::printf("PASS\n");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Character-level self-distillation toolkit"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* c_gen = app.add_subcommand("gen", "Generate a synthetic glyph dataset");
  c_gen->add_option("--out", gen.out, "Output directory")->required();
  c_gen->add_option("--count", gen.count, "Number of samples")->required();
  c_gen->add_option("--seed", gen.seed, "Base seed")->required();
  c_gen->add_option("--touching", gen.touching, "Probability that adjacent glyphs touch");
  c_gen->add_option("--noise", gen.noise, "Gaussian noise sigma, or LO:HI for a per-sample range");

  PseudoArgs pl;
  auto* c_pl = app.add_subcommand("pseudolabel", "Compute K-means pseudo-label masks");
  c_pl->add_option("--data", pl.data, "Dataset directory")->required();
  c_pl->add_option("--out", pl.out, "Mask output directory")->required();
  c_pl->add_option("--report", pl.report, "Per-image CSV report");

  SearchArgs cs;
  auto* c_cs = app.add_subcommand("cluster-search", "Grid search DBSCAN parameters");
  c_cs->add_option("--data", cs.data, "Dataset directory")->required();
  c_cs->add_option("--eps", cs.eps, "Comma-separated eps values");
  c_cs->add_option("--min-samples", cs.min_samples, "Comma-separated min_samples values");
  c_cs->add_option("--report", cs.report, "CSV report")->required();
  c_cs->add_option("--source", cs.source, "Text mask source: gt or pl");
  c_cs->add_option("--workers", cs.workers, "Worker threads (0 = all cores)");

  PretrainArgs pt;
  auto* c_pt = app.add_subcommand("pretrain", "Self-distillation pre-training");
  c_pt->add_option("--data", pt.data, "Dataset directory")->required();
  c_pt->add_option("--config", pt.config, "Run config file")->required();
  c_pt->add_option("--out", pt.out, "Checkpoint path")->required();
  c_pt->add_option("--steps", pt.steps, "Override steps");
  c_pt->add_option("--seed", pt.seed, "Override seed");
  c_pt->add_option("--log", pt.log, "Metrics CSV");
  c_pt->add_option("--workers", pt.workers, "Override workers (0 = all cores)");

  ProbeArgs pr;
  auto* c_pr = app.add_subcommand("probe", "Linear probe on frozen encoder features");
  c_pr->add_option("--ckpt", pr.ckpt, "Checkpoint")->required();
  c_pr->add_option("--data", pr.data, "Dataset directory (last samples are the test split)")->required();
  c_pr->add_flag("--random-init", pr.random_init, "Probe a freshly initialized encoder");
  c_pr->add_option("--report", pr.report, "CSV report (rows appended when the header matches)")->required();
  c_pr->add_option("--encoder", pr.encoder, "teacher or student");
  c_pr->add_option("--test-count", pr.test_count, "Held-out samples (capped at a third of the data)");
  c_pr->add_option("--iterations", pr.iterations, "Probe optimizer steps");
  c_pr->add_option("--seed", pr.seed, "Seed for --random-init (default: checkpoint seed)");
  c_pr->add_option("--workers", pr.workers, "Worker threads (0 = all cores)");

  EvalArgs ev;
  auto* c_ev = app.add_subcommand("eval-seg", "Segmentation-head IoU report");
  c_ev->add_option("--ckpt", ev.ckpt, "Checkpoint")->required();
  c_ev->add_option("--data", ev.data, "Dataset directory")->required();
  c_ev->add_option("--report", ev.report, "CSV report")->required();
  c_ev->add_option("--workers", ev.workers, "Worker threads (0 = all cores)");

  OverlayArgs ov;
  auto* c_ov = app.add_subcommand("overlay", "Write segmentation and cluster overlays");
  c_ov->add_option("--ckpt", ov.ckpt, "Checkpoint")->required();
  c_ov->add_option("--data", ov.data, "Dataset directory")->required();
  c_ov->add_option("--out", ov.out, "Output directory")->required();
  c_ov->add_option("--count", ov.count, "Number of images");
  c_ov->add_option("--workers", ov.workers, "Worker threads (0 = all cores)");

  GradArgs gc;
  auto* c_gc = app.add_subcommand("gradcheck", "Finite-difference gradient check");
  c_gc->add_option("--config", gc.config, "Run config file")->required();
  c_gc->add_option("--tol", gc.tol, "Relative error tolerance");
  c_gc->add_option("--zero-tensor", gc.zero_tensor, "Zero one analytic gradient (fault injection)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n\n" << app.help();
    return 1;
  }

  try {
    if (*c_gen) return run_gen(gen);
    if (*c_pl) return run_pseudolabel(pl);
    if (*c_cs) return run_cluster_search(cs);
    if (*c_pt) return run_pretrain(pt);
    if (*c_pr) return run_probe(pr);
    if (*c_ev) return run_eval_seg(ev);
    if (*c_ov) return run_overlay(ov);
    if (*c_gc) return run_gradcheck(gc);
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "runtime error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
