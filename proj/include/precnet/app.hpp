#pragma once

#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "precnet/checkpoint.hpp"
#include "precnet/common.hpp"
#include "precnet/data.hpp"
#include "precnet/gradcheck.hpp"
#include "precnet/metrics.hpp"
#include "precnet/network.hpp"
#include "precnet/training.hpp"

// Run-level orchestration: everything a CLI subcommand does, callable
// in-process. Each run writes a run_manifest.json echoing its fully
// resolved configuration into the output directory.
namespace precnet::app {

using nlohmann::json;

namespace detail {

inline void ensure_dir(const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir + ": " + ec.message());
}

inline void write_json_file(const std::string& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot create " + path);
  out << j.dump(2) << "\n";
}

inline json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw IoError(path + ": malformed JSON: " + e.what());
  }
  return j;
}

inline void write_run_manifest(const std::string& out_dir, const std::string& command,
                               json resolved) {
  resolved["command"] = command;
  resolved["threads"] = ThreadPool::instance().thread_count();
  write_json_file((std::filesystem::path(out_dir) / "run_manifest.json").string(), resolved);
}

template <typename T>
HostTensor<T> to_scalar(const Frame& f) {
  HostTensor<T> t;
  t.shape = f.shape;
  t.data.assign(f.data.begin(), f.data.end());
  return t;
}

template <typename T>
Frame to_frame(const HostTensor<T>& t) {
  Frame f;
  f.shape = t.shape;
  f.data.assign(t.data.begin(), t.data.end());
  return f;
}

}  // namespace detail

// ---- gen-data --------------------------------------------------------------

struct GenDataArgs {
  std::string out;
  std::uint64_t seed = 7;
  int sequences = 100;
  int length = 30;
  int size = 32;
  int shapes = 2;
  double speed_min = 1.0;
  double speed_max = 2.5;
};

inline void gen_data_run(const GenDataArgs& a) {
  check(!a.out.empty(), "gen-data: output directory required");
  check(a.size % 4 == 0, "gen-data: size must be divisible by 4, got " + std::to_string(a.size));
  SyntheticSpec spec;
  spec.height = spec.width = a.size;
  spec.shape_count = a.shapes;
  spec.speed_min = a.speed_min;
  spec.speed_max = a.speed_max;
  spec.seed = a.seed;
  SequenceDataset ds = generate_synthetic(spec, a.sequences, a.length);
  save_dataset(ds, a.out);
  detail::write_run_manifest(a.out, "gen-data",
                             json{{"seed", a.seed},
                                  {"sequences", a.sequences},
                                  {"length", a.length},
                                  {"size", a.size},
                                  {"shapes", a.shapes},
                                  {"speed_min", a.speed_min},
                                  {"speed_max", a.speed_max}});
}

// ---- train -----------------------------------------------------------------

struct TrainRunArgs {
  std::string config_path;
  std::string out;
  std::string resume;      // checkpoint directory to continue from
  int epochs_override = -1;
};

struct TrainOutcome {
  std::string checkpoint_dir;
  std::vector<std::array<double, 3>> epoch_rows;  // epoch, train_loss, val_loss
  std::vector<double> step_losses;                // concatenated over epochs
};

// Training config file: dataset paths, network (preset name or explicit
// fields), l_s, epochs, batch/sampling sizes, learning-rate schedule, seed.
struct TrainFileConfig {
  std::string dataset;
  std::string val_dataset;  // empty: validate on the training set
  NetworkConfig network;
  TrainConfig tc;
  int frame_stride = 1;

  static TrainFileConfig parse(const json& j) {
    TrainFileConfig c;
    try {
      c.dataset = j.at("dataset").get<std::string>();
      if (j.contains("val_dataset")) c.val_dataset = j["val_dataset"].get<std::string>();
      c.network = config_from_json(j.contains("network") ? j["network"] : json::object());
      if (j.contains("sequence_length")) c.tc.sequence_length = j["sequence_length"].get<int>();
      if (j.contains("epochs")) c.tc.epochs = j["epochs"].get<int>();
      if (j.contains("sequences_per_epoch"))
        c.tc.sequences_per_epoch = j["sequences_per_epoch"].get<int>();
      if (j.contains("val_sequences")) c.tc.val_sequences = j["val_sequences"].get<int>();
      if (j.contains("batch_size")) c.tc.batch_size = j["batch_size"].get<int>();
      if (j.contains("seed")) c.tc.seed = j["seed"].get<std::uint64_t>();
      if (j.contains("frame_stride")) c.frame_stride = j["frame_stride"].get<int>();
      if (j.contains("lr")) c.tc.adam.lr = j["lr"].get<double>();
      if (j.contains("adam")) {
        const json& ja = j["adam"];
        if (ja.contains("beta1")) c.tc.adam.beta1 = ja["beta1"].get<double>();
        if (ja.contains("beta2")) c.tc.adam.beta2 = ja["beta2"].get<double>();
        if (ja.contains("eps")) c.tc.adam.eps = ja["eps"].get<double>();
      }
      if (j.contains("lr_breakpoints")) {
        c.tc.schedule.breakpoints.clear();
        for (const auto& bp : j["lr_breakpoints"])
          c.tc.schedule.breakpoints.emplace_back(bp.at(0).get<int>(), bp.at(1).get<double>());
      }
    } catch (const json::exception& e) {
      throw ValidationError(std::string("bad training config: ") + e.what());
    }
    check(c.tc.sequence_length >= 2, "sequence_length must be >= 2");
    check(c.tc.epochs >= 0, "epochs must be >= 0");
    check(c.tc.batch_size >= 1, "batch_size must be >= 1");
    return c;
  }

  json resolved(int epochs) const {
    json j;
    j["dataset"] = dataset;
    j["val_dataset"] = val_dataset;
    j["network"] = config_to_json(network);
    j["sequence_length"] = tc.sequence_length;
    j["epochs"] = epochs;
    j["sequences_per_epoch"] = tc.sequences_per_epoch;
    j["val_sequences"] = tc.val_sequences;
    j["batch_size"] = tc.batch_size;
    j["seed"] = tc.seed;
    j["frame_stride"] = frame_stride;
    j["adam"] = {{"lr", tc.adam.lr},
                 {"beta1", tc.adam.beta1},
                 {"beta2", tc.adam.beta2},
                 {"eps", tc.adam.eps}};
    j["lr_breakpoints"] = json::array();
    for (const auto& [until, lr] : tc.schedule.breakpoints)
      j["lr_breakpoints"].push_back({until, lr});
    return j;
  }
};

inline TrainOutcome train_run(const TrainRunArgs& a) {
  using T = float;  // training runs in single precision (checkpoint blob format)
  check(!a.out.empty(), "train: output directory required");
  TrainFileConfig cfg = TrainFileConfig::parse(detail::read_json_file(a.config_path));
  if (a.epochs_override >= 0) cfg.tc.epochs = a.epochs_override;
  if (cfg.tc.schedule.breakpoints.empty())
    cfg.tc.schedule = LrSchedule::plateau_then_drop(std::max(cfg.tc.epochs, 1), cfg.tc.adam.lr,
                                                    cfg.tc.adam.lr * 0.1);
  const SequenceDataset train_ds = load_frames(cfg.dataset, cfg.frame_stride);
  const SequenceDataset* val_ds = &train_ds;
  std::optional<SequenceDataset> val_holder;
  if (!cfg.val_dataset.empty()) {
    val_holder = load_frames(cfg.val_dataset, cfg.frame_stride);
    val_ds = &*val_holder;
  }

  NetworkWeights<T> w;
  TrainPosition<T> pos;
  SplitMix64 sampler(cfg.tc.seed);
  int start_epoch = 0;
  if (!a.resume.empty()) {
    w = load_checkpoint<T>(a.resume, &pos);
    check(config_to_json(w.cfg) == config_to_json(cfg.network),
          "resume checkpoint architecture differs from training config");
    check(pos.present, "resume checkpoint carries no training state");
    start_epoch = pos.epoch;
    sampler.set_state(pos.sampler_state);
  } else {
    w = NetworkWeights<T>::init(cfg.network, cfg.tc.seed);
    pos.adam.cfg = cfg.tc.adam;
    pos.adam.init(w.params);
  }
  pos.adam.cfg = cfg.tc.adam;

  detail::ensure_dir(a.out);
  std::ofstream csv(std::filesystem::path(a.out) / "loss.csv");
  if (!csv) throw IoError("cannot create loss.csv in " + a.out);
  csv << "epoch,train_loss,val_loss\n";
  TrainOutcome outcome;
  for (int epoch = start_epoch + 1; epoch <= cfg.tc.epochs; ++epoch) {
    const double lr = cfg.tc.schedule.lr_for_epoch(epoch);
    EpochResult er = run_train_epoch(w, pos.adam, train_ds, cfg.tc, lr, sampler);
    const double val = run_validation(w, *val_ds, cfg.tc, sampler);
    csv << epoch << "," << format_value(er.train_loss) << "," << format_value(val) << "\n";
    csv.flush();
    outcome.epoch_rows.push_back({static_cast<double>(epoch), er.train_loss, val});
    outcome.step_losses.insert(outcome.step_losses.end(), er.step_losses.begin(),
                               er.step_losses.end());
  }
  pos.present = true;
  pos.epoch = cfg.tc.epochs;
  pos.sampler_state = sampler.state();
  outcome.checkpoint_dir = (std::filesystem::path(a.out) / "checkpoint").string();
  save_checkpoint(outcome.checkpoint_dir, w, &pos);
  json manifest = cfg.resolved(cfg.tc.epochs);
  manifest["resume"] = a.resume;
  manifest["checkpoint"] = outcome.checkpoint_dir;
  detail::write_run_manifest(a.out, "train", std::move(manifest));
  return outcome;
}

// ---- shared evaluation helpers ---------------------------------------------

struct WindowScore {
  int index = 0;
  double mse = 0, psnr = 0, ssim = 0;
  double base_mse = 0, base_psnr = 0, base_ssim = 0;
};

struct MeanMetrics {
  double mse = 0, psnr = 0, ssim = 0;
  int count = 0;       // windows contributing to mse/ssim means
  int psnr_count = 0;  // finite-psnr windows only
};

namespace detail {

inline void accumulate(MeanMetrics& m, double mse_v, double psnr_v, double ssim_v) {
  m.mse += mse_v;
  m.ssim += ssim_v;
  ++m.count;
  if (std::isfinite(psnr_v)) {
    m.psnr += psnr_v;
    ++m.psnr_count;
  }
}

inline void finalize(MeanMetrics& m) {
  if (m.count) {
    m.mse /= m.count;
    m.ssim /= m.count;
  }
  m.psnr = m.psnr_count ? m.psnr / m.psnr_count
                        : std::numeric_limits<double>::infinity();
}

}  // namespace detail

// Feeds `context` frames of each non-overlapping window of length
// context + 1 and scores the following prediction against the held-out
// frame, next to the copy-last-frame baseline.
struct NextFrameEval {
  std::vector<WindowScore> rows;
  MeanMetrics model, baseline;
  int skipped_recordings = 0;
};

template <typename T>
NextFrameEval next_frame_eval(const NetworkWeights<T>& w, const SequenceDataset& ds,
                              int context) {
  check(context >= 1, "eval: context must be >= 1");
  NextFrameEval out;
  const std::vector<Window> windows =
      slice_sequences(ds, context + 1, context + 1, &out.skipped_recordings);
  check(!windows.empty(), "evaluation dataset yields no windows of length " +
                              std::to_string(context + 1));
  const double peak = w.cfg.pix_max;
  for (std::size_t wi = 0; wi < windows.size(); ++wi) {
    const Recording& rec = ds.recordings[windows[wi].recording];
    const int s = windows[wi].start;
    Predictor<T> p(w, ds.height, ds.width);
    for (int t = 0; t < context; ++t)
      p.observe(detail::to_scalar<T>(rec.frames[s + t]));
    const Frame pred = detail::to_frame(p.peek_prediction());
    const Frame& target = rec.frames[s + context];
    const Frame& last = rec.frames[s + context - 1];
    WindowScore row;
    row.index = static_cast<int>(wi);
    row.mse = mse(pred.data, target.data);
    row.psnr = psnr_from_mse(row.mse, peak);
    row.ssim = ssim(pred, target, peak);
    row.base_mse = mse(last.data, target.data);
    row.base_psnr = psnr_from_mse(row.base_mse, peak);
    row.base_ssim = ssim(last, target, peak);
    detail::accumulate(out.model, row.mse, row.psnr, row.ssim);
    detail::accumulate(out.baseline, row.base_mse, row.base_psnr, row.base_ssim);
    out.rows.push_back(row);
  }
  detail::finalize(out.model);
  detail::finalize(out.baseline);
  return out;
}

// Closed-loop generation: windows of length context + horizon; per-horizon
// means across windows. Optionally collects the generated frames.
struct RolloutEval {
  std::vector<MeanMetrics> per_t;  // index 0 is horizon T=1
  std::vector<std::vector<Frame>> frames;  // per window, horizon frames
  int skipped_recordings = 0;
};

template <typename T>
RolloutEval rollout_eval(const NetworkWeights<T>& w, const SequenceDataset& ds, int context,
                         int horizon, bool keep_frames) {
  check(context >= 1, "rollout: context must be >= 1");
  check(horizon >= 1, "rollout: horizon must be >= 1");
  RolloutEval out;
  out.per_t.resize(horizon);
  const std::vector<Window> windows =
      slice_sequences(ds, context + horizon, context + horizon, &out.skipped_recordings);
  check(!windows.empty(), "rollout dataset yields no windows of length " +
                              std::to_string(context + horizon));
  const double peak = w.cfg.pix_max;
  for (std::size_t wi = 0; wi < windows.size(); ++wi) {
    const Recording& rec = ds.recordings[windows[wi].recording];
    const int s = windows[wi].start;
    Predictor<T> p(w, ds.height, ds.width);
    for (int t = 0; t < context; ++t)
      p.observe(detail::to_scalar<T>(rec.frames[s + t]));
    std::vector<Frame> preds;
    for (int t = 0; t < horizon; ++t) {
      const Frame pred = detail::to_frame(p.closed_loop());
      // Closed-loop errors at the bottom level must vanish identically.
      for (const T v : p.state().E[0].data)
        if (v != T(0)) throw NumericError("closed-loop bottom error is non-zero");
      const Frame& target = rec.frames[s + context + t];
      const double m = mse(pred.data, target.data);
      detail::accumulate(out.per_t[t], m, psnr_from_mse(m, peak), ssim(pred, target, peak));
      if (keep_frames) preds.push_back(pred);
    }
    if (keep_frames) out.frames.push_back(std::move(preds));
  }
  for (auto& m : out.per_t) detail::finalize(m);
  return out;
}

// ---- eval ------------------------------------------------------------------

struct EvalArgs {
  std::string checkpoint;
  std::string data;
  std::string out;
  int context = 10;
  int frame_stride = 1;
};

inline NextFrameEval eval_run(const EvalArgs& a) {
  using T = float;
  check(!a.out.empty(), "eval: output directory required");
  NetworkWeights<T> w = load_checkpoint<T>(a.checkpoint);
  const SequenceDataset ds = load_frames(a.data, a.frame_stride);
  NextFrameEval rep = next_frame_eval(w, ds, a.context);
  detail::ensure_dir(a.out);
  std::ofstream csv(std::filesystem::path(a.out) / "metrics.csv");
  if (!csv) throw IoError("cannot create metrics.csv in " + a.out);
  csv << "frame_index,mse,psnr,ssim,baseline_mse,baseline_psnr,baseline_ssim\n";
  for (const WindowScore& r : rep.rows) {
    csv << r.index << "," << format_value(r.mse) << "," << format_value(r.psnr) << ","
        << format_value(r.ssim) << "," << format_value(r.base_mse) << ","
        << format_value(r.base_psnr) << "," << format_value(r.base_ssim) << "\n";
  }
  const auto mean_json = [](const MeanMetrics& m) {
    return json{{"mse", m.mse},
                {"psnr", m.psnr_count ? json(m.psnr) : json("inf")},
                {"ssim", m.ssim},
                {"windows", m.count},
                {"finite_psnr_windows", m.psnr_count}};
  };
  detail::write_json_file(
      (std::filesystem::path(a.out) / "summary.json").string(),
      json{{"model", mean_json(rep.model)},
           {"copy_last_baseline", mean_json(rep.baseline)},
           {"windows", rep.rows.size()},
           {"skipped_recordings", rep.skipped_recordings}});
  detail::write_run_manifest(a.out, "eval",
                             json{{"checkpoint", a.checkpoint},
                                  {"data", a.data},
                                  {"context", a.context},
                                  {"frame_stride", a.frame_stride}});
  return rep;
}

// ---- rollout ---------------------------------------------------------------

struct RolloutArgs {
  std::string checkpoint;
  std::string data;
  std::string out;
  int horizon = 5;
  int context = 10;
  int frame_stride = 1;
};

inline RolloutEval rollout_run(const RolloutArgs& a) {
  using T = float;
  check(!a.out.empty(), "rollout: output directory required");
  NetworkWeights<T> w = load_checkpoint<T>(a.checkpoint);
  const SequenceDataset ds = load_frames(a.data, a.frame_stride);
  RolloutEval rep = rollout_eval(w, ds, a.context, a.horizon, /*keep_frames=*/true);
  detail::ensure_dir(a.out);
  // Emitted predictions form a loadable dataset: one recording per window.
  SequenceDataset gen;
  gen.height = ds.height;
  gen.width = ds.width;
  gen.fps = ds.fps;
  for (std::size_t wi = 0; wi < rep.frames.size(); ++wi) {
    Recording rec;
    rec.name = index_name("recording_", static_cast<int>(wi), 4);
    rec.frames = rep.frames[wi];
    gen.recordings.push_back(std::move(rec));
  }
  save_dataset(gen, (std::filesystem::path(a.out) / "frames").string());
  std::ofstream csv(std::filesystem::path(a.out) / "rollout.csv");
  if (!csv) throw IoError("cannot create rollout.csv in " + a.out);
  csv << "frame_index,mse,psnr,ssim\n";
  for (int t = 0; t < a.horizon; ++t) {
    const MeanMetrics& m = rep.per_t[t];
    csv << (t + 1) << "," << format_value(m.mse) << "," << format_value(m.psnr) << ","
        << format_value(m.ssim) << "\n";
  }
  detail::write_run_manifest(a.out, "rollout",
                             json{{"checkpoint", a.checkpoint},
                                  {"data", a.data},
                                  {"horizon", a.horizon},
                                  {"context", a.context},
                                  {"frame_stride", a.frame_stride}});
  return rep;
}

// ---- param-count -----------------------------------------------------------

inline std::int64_t param_count_run(const std::string& preset_or_config,
                                    std::ostream& os) {
  NetworkConfig cfg;
  if (std::filesystem::is_regular_file(preset_or_config)) {
    cfg = config_from_json(detail::read_json_file(preset_or_config));
  } else {
    cfg = preset_config(preset_or_config);
  }
  const std::int64_t n = count_parameters(cfg);
  os << n << "\n";
  return n;
}

// ---- verify ----------------------------------------------------------------

// Self-check suite: parameter-count oracles against brute-force enumeration
// and the published figures, gradient checks, metric identities, checkpoint
// round trip. Throws on failure (mapped to a nonzero exit by the CLI).
inline bool verify_run(std::ostream& os, bool thorough = false) {
  int failures = 0;
  const auto report = [&](bool ok, const std::string& name, const std::string& detail_msg) {
    os << (ok ? "[ok]   " : "[FAIL] ") << name;
    if (!detail_msg.empty()) os << ": " << detail_msg;
    os << "\n";
    if (!ok) ++failures;
  };

  // Parameter counts: closed form vs enumerated tensor sizes, plus the two
  // configurations with exactly known totals.
  const auto count_pair = [&](const std::string& preset) {
    const NetworkConfig cfg = preset_config(preset);
    const std::int64_t closed = count_parameters(cfg);
    const std::int64_t enumerated = NetworkWeights<float>::init(cfg, 1).params.total_size();
    report(closed == enumerated, "param-count." + preset,
           "closed form " + std::to_string(closed) + ", enumerated " +
               std::to_string(enumerated));
    return closed;
  };
  report(count_pair("standard") == 7598763, "param-count.standard.value",
         "expected 7598763 (published: approximately 7.6M)");
  report(count_pair("small") == 848123, "param-count.small.value",
         "expected 848123 (published: approximately 0.8M)");
  count_pair("single_lstm");  // enumeration cross-check; published only as "7.0M"
  count_pair("tiny");

  // Gradient fidelity.
  {
    const GradCheckResult ops = op_gradient_checks();
    report(ops.max_rel_err < 1e-4, "gradcheck.ops",
           "max rel err " + format_value(ops.max_rel_err) + " over " +
               std::to_string(ops.checked) + " elements (worst " + ops.worst + ")");
    const int stride = thorough ? 1 : 7;
    // Fixture seed chosen so no finite-difference probe straddles an
    // activation kink; nearby seeds put a pre-activation within eps of a
    // relu corner and report spurious ~1e-3 deviations.
    const GradCheckResult net =
        network_gradient_check(preset_config("tiny"), 8, 8, 3, /*seed=*/3, 1e-5, 1e-7, stride);
    report(net.max_rel_err < 1e-3, "gradcheck.network",
           "max rel err " + format_value(net.max_rel_err) + " over " +
               std::to_string(net.checked) + " parameters (worst " + net.worst + ")");
  }

  // Metric identities and a naive-oracle comparison.
  {
    SplitMix64 rng(99);
    Frame a(Shape{3, 32, 32}), b(Shape{3, 32, 32});
    for (float& v : a.data) v = static_cast<float>(rng.next_double());
    for (float& v : b.data) v = static_cast<float>(rng.next_double());
    report(ssim(a, a, 1.0) == 1.0, "metrics.ssim.self", "ssim(x,x) == 1 exactly");
    // Double pixels: float storage of 0.6 would shift the result by ~7e-9,
    // past the 1e-9 agreement this check demands.
    HostTensor<double> ca(Shape{3, 16, 16}), cb(Shape{3, 16, 16});
    for (double& v : ca.data) v = 0.5;
    for (double& v : cb.data) v = 0.6;
    const double closed = (2 * 0.5 * 0.6 + 1e-4) / (0.5 * 0.5 + 0.6 * 0.6 + 1e-4);
    report(std::abs(ssim(ca, cb, 1.0) - closed) < 1e-9, "metrics.ssim.constant",
           "closed form " + format_value(closed));
    report(std::abs(psnr_from_mse(0.01, 1.0) - 20.0) < 1e-12, "metrics.psnr.20db", "");
    double naive_mse = 0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
      const double d = static_cast<double>(a.data[i]) - b.data[i];
      naive_mse += d * d;
    }
    naive_mse /= static_cast<double>(a.data.size());
    report(std::abs(mse(a.data, b.data) - naive_mse) < 1e-9, "metrics.mse.naive", "");
  }

  // Checkpoint round trip and corruption detection.
  {
    namespace fs = std::filesystem;
    const fs::path dir = fs::temp_directory_path() / "precnet_verify_ckpt";
    fs::remove_all(dir);
    NetworkWeights<float> w = NetworkWeights<float>::init(preset_config("tiny"), 3);
    save_checkpoint(dir.string(), w);
    NetworkWeights<float> r = load_checkpoint<float>(dir.string());
    bool same = r.params.items.size() == w.params.items.size();
    for (std::size_t i = 0; same && i < w.params.items.size(); ++i)
      same = w.params.items[i].second.data == r.params.items[i].second.data;
    report(same, "checkpoint.roundtrip", "bit-exact reload");
    std::ofstream corrupt(dir / "checkpoint.json", std::ios::trunc);
    corrupt << "{ not json";
    corrupt.close();
    bool rejected = false;
    try {
      load_checkpoint<float>(dir.string());
    } catch (const Error&) {
      rejected = true;
    }
    report(rejected, "checkpoint.corrupt-manifest", "load failure reported");
    fs::remove_all(dir);
  }

  os << (failures == 0 ? "verify: all checks passed\n"
                       : "verify: " + std::to_string(failures) + " check(s) failed\n");
  if (failures) throw NumericError("verification failed (" + std::to_string(failures) +
                                   " check(s))");
  return true;
}

}  // namespace precnet::app
