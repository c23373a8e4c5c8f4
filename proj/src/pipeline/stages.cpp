#include "difflens/pipeline/stages.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <iostream>
#include <sstream>

#include "difflens/core/error.hpp"
#include "difflens/core/tensor_io.hpp"
#include "difflens/pipeline/report.hpp"
#include "difflens/synthdata.hpp"

namespace difflens::pipeline {

namespace fs = std::filesystem;
using Eigen::MatrixXd;
using Eigen::VectorXd;
using core::format_double;

namespace {

struct Ctx {
  const ExperimentConfig& cfg;
  const Workspace& ws;
  std::ostream& log;
  fs::path dir;
  std::map<std::string, std::string> info;

  fs::path in(const std::string& stage, const std::string& file) const { return ws.stage_dir(stage) / file; }
};

std::ostream& null_stream() {
  static std::ostream s(nullptr);
  return s;
}

const std::vector<std::string> kAttributes{"attr_a", "attr_b"};
int num_classes(const std::string& attribute) { return attribute == "attr_a" ? synth::kClassesA : synth::kClassesB; }

std::string feature_file(const std::string& attribute, int y) {
  return "features_" + attribute + "_class" + std::to_string(y) + ".txt";
}
std::string activation_file(const std::string& attribute, int y) {
  return "activation_" + attribute + "_class" + std::to_string(y) + ".txt";
}
std::string table_file(const std::string& attribute, int y) {
  return "table_" + attribute + "_class" + std::to_string(y) + ".txt";
}

core::Tensor images_tensor(const MatrixXd& images) { return core::Tensor::from_matrix(images.transpose()); }
MatrixXd tensor_images(const core::Tensor& t) { return t.to_matrix().transpose(); }

diffusion::DenoiserArch arch_of(const ExperimentConfig& cfg) {
  return {cfg.data.side, cfg.denoiser.hidden1, cfg.denoiser.bottleneck, cfg.denoiser.hidden2, cfg.denoiser.embed};
}

intervention::Mode mode_of(const ExperimentConfig& cfg) { return intervention::parse_mode(cfg.intervention.mode); }

struct Dump {
  std::vector<MatrixXd> H;  // per chain n x T
  MatrixXd images;
};

void save_dump(const fs::path& path, const diffusion::HiddenTrace& trace, const std::vector<core::Tensor>& images,
               std::uint64_t seed) {
  const auto chains = trace.size();
  const auto n = static_cast<std::size_t>(trace.front().rows());
  const auto T = static_cast<std::size_t>(trace.front().cols());
  core::Tensor hidden({chains, n, T});
  for (std::size_t c = 0; c < chains; ++c)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t t = 0; t < T; ++t)
        hidden[(c * n + i) * T + t] = trace[c](static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(t));
  MatrixXd imgs(static_cast<Eigen::Index>(images.front().size()), static_cast<Eigen::Index>(chains));
  for (std::size_t c = 0; c < chains; ++c) imgs.col(static_cast<Eigen::Index>(c)) = images[c].flat();
  core::Archive ar;
  ar.header["chains"] = std::to_string(chains);
  ar.header["seed"] = std::to_string(seed);
  ar.put("hidden", std::move(hidden));
  ar.put("images", images_tensor(imgs));
  ar.save(path);
}

Dump load_dump(const fs::path& path) {
  const auto ar = core::Archive::load(path);
  const auto& hidden = ar.get("hidden");
  if (hidden.rank() != 3) throw FormatError("activation dump: hidden states must be rank 3");
  const auto chains = hidden.shape()[0], n = hidden.shape()[1], T = hidden.shape()[2];
  Dump d;
  d.H.assign(chains, MatrixXd(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(T)));
  for (std::size_t c = 0; c < chains; ++c)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t t = 0; t < T; ++t)
        d.H[c](static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(t)) = hidden[(c * n + i) * T + t];
  d.images = tensor_images(ar.get("images"));
  return d;
}

std::vector<attribution::SupportSample> support_of(const Dump& d, int size) {
  std::vector<attribution::SupportSample> out;
  for (std::size_t c = 0; c < static_cast<std::size_t>(size); ++c) out.push_back({c, d.H[c]});
  return out;
}

std::string csv_join(std::initializer_list<std::string> cells) {
  std::string out;
  for (const auto& c : cells) out += (out.empty() ? "" : ",") + c;
  return out + "\n";
}

// ---------------------------------------------------------------- stages

void gen_data(Ctx& ctx) {
  const auto& c = ctx.cfg.data;
  synth::BiasSpec spec;
  std::copy(c.attr_a_probs.begin(), c.attr_a_probs.end(), spec.attr_a_probs.begin());
  std::copy(c.attr_b_probs.begin(), c.attr_b_probs.end(), spec.attr_b_probs.begin());
  core::RngStream train_rng(c.seed, 0), heldout_rng(c.seed, 1);
  const auto train = synth::sample_dataset(static_cast<std::size_t>(c.n_train), spec, c.side, train_rng);
  const auto heldout = synth::sample_dataset(static_cast<std::size_t>(c.n_heldout), spec, c.side, heldout_rng);
  synth::save_dataset(ctx.dir / "train", train);
  synth::save_dataset(ctx.dir / "heldout", heldout);
  std::size_t minority = 0;
  for (const auto& s : train) minority += s.factors.attr_a == 1 ? 1 : 0;
  ctx.info["train_attr_a_class1_fraction"] = format_double(static_cast<double>(minority) / train.size());
  ctx.log << "gen-data: " << train.size() << " training and " << heldout.size() << " held-out images\n";
}

void train_diffusion(Ctx& ctx) {
  const auto& c = ctx.cfg.denoiser;
  const auto data = synth::load_dataset(ctx.in("gen-data", "train"));
  const auto schedule = diffusion::make_schedule(ctx.cfg.schedule.T, ctx.cfg.schedule.beta_min, ctx.cfg.schedule.beta_max);
  std::string csv = "epoch,loss\n";
  const auto result = diffusion::train_denoiser(
      synth::image_matrix(data), schedule, arch_of(ctx.cfg), {c.epochs, c.lr, c.batch, c.seed},
      [&](int epoch, double loss) {
        csv += std::to_string(epoch) + "," + format_double(loss) + "\n";
        if (epoch % 10 == 0 || epoch + 1 == c.epochs) ctx.log << "train-diffusion: epoch " << epoch << " loss " << loss << "\n";
      });
  diffusion::save_denoiser(ctx.dir / "denoiser.dlc", result.params, schedule, c.seed);
  core::atomic_write_text(ctx.dir / "loss.csv", csv);
  ctx.info["initial_loss"] = format_double(result.epoch_loss.front());
  ctx.info["final_loss"] = format_double(result.epoch_loss.back());
}

void dump_activations(Ctx& ctx) {
  const auto ck = diffusion::load_denoiser(ctx.in("train-diffusion", "denoiser.dlc"));
  diffusion::HiddenTrace trace;
  const auto images = diffusion::sample(ck.params, ck.schedule, static_cast<std::size_t>(ctx.cfg.dump.chains),
                                        ctx.cfg.dump.seed, {}, &trace);
  save_dump(ctx.dir / "trace.dla", trace, images, ctx.cfg.dump.seed);
  ctx.log << "dump-activations: " << images.size() << " chains x " << ck.schedule.T << " timesteps\n";
}

void train_sae(Ctx& ctx) {
  const auto& c = ctx.cfg.sae;
  const auto dump = load_dump(ctx.in("dump-activations", "trace.dla"));
  const auto n = dump.H.front().rows();
  const auto T = dump.H.front().cols();
  MatrixXd H(n, static_cast<Eigen::Index>(dump.H.size()) * T);
  for (std::size_t ch = 0; ch < dump.H.size(); ++ch) H.middleCols(static_cast<Eigen::Index>(ch) * T, T) = dump.H[ch];
  std::string csv = "epoch,fvu,dead_features\n";
  const auto result = sae::train_sae(H, c.m, c.k, {c.lr, c.epochs, c.batch, c.seed}, [&](int epoch, double f, int dead) {
    csv += std::to_string(epoch) + "," + format_double(f) + "," + std::to_string(dead) + "\n";
    ctx.log << "train-sae: epoch " << epoch << " fvu " << f << " dead " << dead << "\n";
  });
  sae::save_sae(ctx.dir / "sae.dlc", result.params, c.seed);
  core::atomic_write_text(ctx.dir / "fvu.csv", "initial_fvu," + format_double(result.initial_fvu) + "\n" + csv);
  const auto cos = sae::decoder_cosine_stats(result.params);
  ctx.info["final_fvu"] = format_double(result.epoch_fvu.back());
  ctx.info["decoder_cosine_mean_abs"] = format_double(cos.mean_abs);
  ctx.info["decoder_cosine_max_abs"] = format_double(cos.max_abs);
}

void train_probe(Ctx& ctx) {
  const auto& c = ctx.cfg.probe;
  const auto train = synth::load_dataset(ctx.in("gen-data", "train"));
  const auto heldout = synth::load_dataset(ctx.in("gen-data", "heldout"));
  const MatrixXd X = synth::image_matrix(train);
  const MatrixXd Xh = synth::image_matrix(heldout);
  const auto dump = load_dump(ctx.in("dump-activations", "trace.dla"));
  const int T = static_cast<int>(dump.H.front().cols());

  std::vector<probe::ProbeParams> probes;
  std::string oracle_log;
  for (std::size_t a = 0; a < kAttributes.size(); ++a) {
    const auto& attr = kAttributes[a];
    const bool is_b = attr == "attr_b";
    probe::OracleTrainConfig oc{c.oracle_hidden, c.oracle_epochs, c.oracle_lr, c.oracle_batch, c.oracle_seed + a,
                                c.oracle_min_accuracy};
    const auto oracle = probe::train_oracle(X, synth::labels(train, is_b), num_classes(attr), Xh,
                                            synth::labels(heldout, is_b), oc, attr);
    probe::save_oracle(ctx.dir / ("oracle_" + attr + ".dlc"), oracle);
    ctx.info["oracle_" + attr + "_heldout_accuracy"] = format_double(oracle.heldout_accuracy);
    ctx.log << "train-probe: oracle " << attr << " held-out accuracy " << oracle.heldout_accuracy << "\n";

    const auto labels = probe::oracle_labels(dump.images, oracle);
    std::vector<probe::ProbeExample> examples;
    for (std::size_t ch = 0; ch < dump.H.size(); ++ch)
      for (int t = 0; t < T; ++t) examples.push_back({dump.H[ch].col(t), t, labels[ch]});
    auto pr = probe::train_probe(examples, T, num_classes(attr), {c.lr, c.iterations, c.holdout}, attr);
    probe::save_probe(ctx.dir / ("probe_" + attr + ".dlc"), pr);
    ctx.info["probe_" + attr + "_accuracy_t0"] = format_double(pr.heldout_accuracy.front());
    ctx.info["probe_" + attr + "_accuracy_tmax"] = format_double(pr.heldout_accuracy.back());
    probes.push_back(std::move(pr));
  }
  std::string csv = "t,accuracy_attr_a,accuracy_attr_b\n";
  for (int t = 0; t < T; ++t)
    csv += std::to_string(t) + "," + format_double(probes[0].heldout_accuracy[static_cast<std::size_t>(t)]) + "," +
           format_double(probes[1].heldout_accuracy[static_cast<std::size_t>(t)]) + "\n";
  core::atomic_write_text(ctx.dir / "probe_accuracy.csv", csv);

  metrics::save_pca(ctx.dir / "pca.dlc", metrics::fit_pca(X, c.pca_dim));
  const auto w = metrics::PixelWhitener::fit(X);
  core::Archive ar;
  ar.put("mean", core::Tensor::from_vector(w.mean));
  ar.put("scale", core::Tensor::from_vector(w.scale));
  ar.save(ctx.dir / "whitener.dlc");
}

void attribute(Ctx& ctx) {
  const auto& c = ctx.cfg.attribution;
  const auto dump = load_dump(ctx.in("dump-activations", "trace.dla"));
  const auto sae = sae::load_sae(ctx.in("train-sae", "sae.dlc"));
  const auto support = support_of(dump, c.support);
  for (const auto& attr : kAttributes) {
    const auto pr = probe::load_probe(ctx.in("train-probe", "probe_" + attr + ".dlc"));
    for (int y = 0; y < num_classes(attr); ++y) {
      attribution::AttributionConfig ac{c.q, c.tau,
                                        c.baseline == "zero" ? attribution::BaselineMode::zero
                                                             : attribution::BaselineMode::per_input,
                                        y, c.support};
      auto table = attribution::aggregate(support, pr, sae, ac);
      table.provenance["dump_seed"] = std::to_string(ctx.cfg.dump.seed);
      table.provenance["sae_seed"] = std::to_string(ctx.cfg.sae.seed);
      attribution::save_table(ctx.dir / table_file(attr, y), table);
      const auto set = attribution::select_top_tau(table, c.tau);
      attribution::save_feature_set(ctx.dir / feature_file(attr, y), set);
      ctx.log << "attribute: " << attr << " class " << y << " done\n";
    }
  }
  for (const auto& attr : kAttributes) {
    const auto labels = probe::oracle_labels(dump.images, probe::load_oracle(ctx.in("train-probe", "oracle_" + attr + ".dlc")));
    for (int y = 0; y < num_classes(attr); ++y) {
      std::vector<attribution::SupportSample> members;
      for (std::size_t ch = 0; ch < dump.H.size() && members.size() < static_cast<std::size_t>(c.support); ++ch)
        if (labels[ch] == y) members.push_back({ch, dump.H[ch]});
      ctx.info["activation_" + attr + "_class" + std::to_string(y) + "_chains"] = std::to_string(members.size());
      if (members.empty()) {
        ctx.log << "attribute: no dump chain is labeled " << attr << " class " << y
                << "; activation baseline uses the unconditioned support\n";
        members = support;
      }
      attribution::save_feature_set(ctx.dir / activation_file(attr, y),
                                    attribution::activation_select(members, sae, c.tau, attr, y));
    }
  }
}

void write_trace(std::string& csv, const std::string& method, const intervention::CalibrationResult& r) {
  for (std::size_t i = 0; i < r.trace.size(); ++i)
    csv += csv_join({method, std::to_string(i), format_double(r.trace[i].beta), format_double(r.trace[i].ratio)});
}

void calibrate(Ctx& ctx) {
  const auto& c = ctx.cfg.intervention;
  const auto models = Models::load(ctx.ws);
  const int cls = minority_class(ctx.cfg);
  const auto attr_set = attribution::load_feature_set(ctx.in("attribute", feature_file(c.attribute, cls)));
  const auto act_set = attribution::load_feature_set(ctx.in("attribute", activation_file(c.attribute, cls)));

  const auto attr_res = calibrate_features(models, ctx.cfg, attr_set.A, cls, c.seed);
  const auto act_res = calibrate_features(models, ctx.cfg, act_set.A, cls, c.seed);
  std::string csv = "method,step,beta,ratio\n";
  write_trace(csv, "attribution", attr_res);
  write_trace(csv, "activation", act_res);
  core::atomic_write_text(ctx.dir / "calibration.csv", csv);
  if (!attr_res.reached)
    throw NumericError("calibrate-beta: target ratio " + format_double(c.target_ratio) + " unreachable within [" +
                       format_double(c.beta_lo) + ", " + format_double(c.beta_hi) + "]; achievable range [" +
                       format_double(attr_res.range_lo) + ", " + format_double(attr_res.range_hi) + "]");
  const int k = num_classes(c.attribute);
  intervention::save_spec(ctx.dir / "spec_attribution.ini",
                          steering_spec(c.attribute, k, cls, attr_set.A, attr_res.beta, mode_of(ctx.cfg), c.seed));
  intervention::save_spec(ctx.dir / "spec_activation.ini",
                          steering_spec(c.attribute, k, cls, act_set.A, act_res.beta, mode_of(ctx.cfg), c.seed));
  ctx.info["minority_class"] = std::to_string(cls);
  ctx.info["attribution_beta"] = format_double(attr_res.beta);
  ctx.info["attribution_ratio"] = format_double(attr_res.ratio);
  ctx.info["activation_beta"] = format_double(act_res.beta);
  ctx.info["activation_ratio"] = format_double(act_res.ratio);
  ctx.info["activation_reached"] = act_res.reached ? "yes" : "no";
  ctx.log << "calibrate-beta: attribution beta " << attr_res.beta << " (ratio " << attr_res.ratio
          << "), activation beta " << act_res.beta << " (ratio " << act_res.ratio << ")\n";
}

void debias(Ctx& ctx) {
  const auto& e = ctx.cfg.evaluation;
  const auto models = Models::load(ctx.ws);
  const auto n = static_cast<std::size_t>(e.samples);
  core::save_tensor(ctx.dir / "samples_original.dlt", images_tensor(generate(models, n, e.seed)));
  for (const std::string method : {"attribution", "activation"}) {
    const auto spec = intervention::load_spec(ctx.in("calibrate-beta", "spec_" + method + ".ini"));
    std::vector<std::size_t> drawn(spec.entries.size(), 0);
    for (std::size_t ch = 0; ch < n; ++ch) ++drawn[static_cast<std::size_t>(intervention::drawn_class(spec, ch))];
    for (std::size_t k = 0; k < drawn.size(); ++k)
      ctx.info[method + "_chains_class" + std::to_string(k)] = std::to_string(drawn[k]);
    core::save_tensor(ctx.dir / ("samples_" + method + ".dlt"),
                      images_tensor(generate(models, n, e.seed, intervention::make_hook(spec, models.sae))));
    ctx.log << "debias: " << method << " samples written\n";
  }
}

void evaluate(Ctx& ctx) {
  const auto models = Models::load(ctx.ws);
  const int cls = minority_class(ctx.cfg);
  const MatrixXd original = tensor_images(core::load_tensor(ctx.in("debias", "samples_original.dlt")));
  std::string csv = "run,n,class_ratio,fd,frechet,similarity,similarity_skipped\n";
  for (const std::string run : {"original", "attribution", "activation"}) {
    const MatrixXd imgs = tensor_images(core::load_tensor(ctx.in("debias", "samples_" + run + ".dlt")));
    const auto m = evaluate_images(models, imgs, original, cls);
    csv += csv_join({run, std::to_string(m.n), format_double(m.ratio), format_double(m.fd), format_double(m.frechet),
                     format_double(m.similarity), std::to_string(m.similarity_skipped)});
    ctx.log << "evaluate: " << run << " ratio " << m.ratio << " fd " << m.fd << " frechet " << m.frechet
            << " similarity " << m.similarity << "\n";
  }
  const auto half = models.reference.cols() / 2;
  const auto floor = metrics::desk_frechet(models.reference.leftCols(half),
                                           models.reference.middleCols(half, half), models.pca);
  csv += csv_join({"noise_floor", std::to_string(half), "", "", format_double(floor.value), "", ""});
  core::atomic_write_text(ctx.dir / "metrics.csv", csv);

  const auto set = attribution::load_feature_set(ctx.in("attribute", feature_file(ctx.cfg.intervention.attribute, cls)));
  const auto curve = run_control_curve(models, ctx.cfg, set.A, cls, ctx.cfg.evaluation.seed);
  core::atomic_write_text(ctx.dir / "curve.csv", curve_csv(curve));
  ctx.info["curve_spearman"] = format_double(curve.rank_correlation());
}

void gallery(Ctx& ctx) {
  const auto& g = ctx.cfg.gallery;
  const auto models = Models::load(ctx.ws);
  const int cls = minority_class(ctx.cfg);
  const auto table = attribution::load_table(ctx.in("attribute", table_file(ctx.cfg.intervention.attribute, cls)));
  const auto ranked = attribution::top_tau(table.scores, g.features);
  std::vector<int> order(ranked.begin(), ranked.end());
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return table.scores[static_cast<std::size_t>(a)] > table.scores[static_cast<std::size_t>(b)];
  });
  std::string csv = "feature,beta,mean_prob_class" + std::to_string(cls) + "\n";
  for (int f : order) {
    const auto grid = intervention::feature_gallery(models.den.params, models.den.schedule, models.sae, f, g.betas,
                                                    static_cast<std::size_t>(g.rows), g.seed);
    intervention::write_pgm(ctx.dir / ("gallery_feature" + std::to_string(f) + ".pgm"), grid);
    std::vector<double> logb, prob;
    for (std::size_t col = 0; col < grid.cols; ++col) {
      double p = 0.0;
      for (std::size_t r = 0; r < grid.rows; ++r)
        p += probe::oracle_classify(grid.at(r, col), models.oracle_a)[cls];
      p /= static_cast<double>(grid.rows);
      logb.push_back(std::log(g.betas[col]));
      prob.push_back(p);
      csv += csv_join({std::to_string(f), format_double(g.betas[col]), format_double(p)});
    }
    if (logb.size() >= 2)
      ctx.info["spearman_feature" + std::to_string(f)] = format_double(metrics::spearman(logb, prob));
  }
  core::atomic_write_text(ctx.dir / "gallery.csv", csv);
}

void report(Ctx& ctx) {
  write_report(ctx.dir, core::read_text(ctx.in("evaluate", "metrics.csv")), core::read_text(ctx.in("evaluate", "curve.csv")),
               *ctx.ws.read_manifest("calibrate-beta"), *ctx.ws.read_manifest("gallery"), ctx.cfg);
}

const std::map<std::string, std::function<void(Ctx&)>>& stage_functions() {
  static const std::map<std::string, std::function<void(Ctx&)>> fns = {
      {"gen-data", gen_data},       {"train-diffusion", train_diffusion}, {"dump-activations", dump_activations},
      {"train-sae", train_sae},     {"train-probe", train_probe},         {"attribute", attribute},
      {"calibrate-beta", calibrate}, {"debias", debias},                  {"evaluate", evaluate},
      {"gallery", gallery},         {"report", report}};
  return fns;
}

std::vector<std::string> list_files(const fs::path& dir) {
  std::vector<std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file() && e.path().filename() != "manifest.txt")
      out.push_back(fs::relative(e.path(), dir).generic_string());
  std::sort(out.begin(), out.end());
  return out;
}

void verify_dependencies(const std::string& stage, const ExperimentConfig& cfg, const Workspace& ws) {
  for (const auto& dep : stage_info(stage).deps) {
    const auto m = ws.read_manifest(dep);
    if (!m)
      throw DependencyError(stage + " needs the " + dep + " artifact (" + ws.manifest_path(dep).string() +
                            " missing); run '" + dep + "' first");
    if (m->config_hash != stage_config_hash(cfg, dep))
      throw DependencyError(stage + " needs the " + dep + " artifact, but it was produced by a different config; rerun '" +
                            dep + "'");
    if (const auto problem = ws.integrity_problem(*m); !problem.empty())
      throw DependencyError(stage + " cannot use the " + dep + " artifact: " + problem);
    verify_dependencies(dep, cfg, ws);
  }
}

}  // namespace

const std::vector<StageInfo>& stage_table() {
  static const std::vector<StageInfo> table = {
      {"gen-data", {}, {"data"}},
      {"train-diffusion", {"gen-data"}, {"schedule", "denoiser"}},
      {"dump-activations", {"train-diffusion"}, {"dump"}},
      {"train-sae", {"dump-activations"}, {"sae"}},
      {"train-probe", {"train-sae"}, {"probe"}},
      {"attribute", {"train-probe"}, {"attribution"}},
      {"calibrate-beta", {"attribute"}, {"intervention"}},
      {"debias", {"calibrate-beta"}, {"evaluation"}},
      {"evaluate", {"debias"}, {"evaluation"}},
      {"gallery", {"evaluate"}, {"gallery"}},
      {"report", {"evaluate", "gallery"}, {}},
  };
  return table;
}

const StageInfo& stage_info(const std::string& name) {
  for (const auto& s : stage_table())
    if (s.name == name) return s;
  throw ConfigError("unknown stage '" + name + "'");
}

std::string stage_config_hash(const ExperimentConfig& cfg, const std::string& stage) {
  const auto& info = stage_info(stage);
  std::string text = "stage " + stage + "\n";
  for (const auto& s : info.sections) text += cfg.section_text(s);
  for (const auto& d : info.deps) text += "dep " + d + " " + stage_config_hash(cfg, d) + "\n";
  return fnv1a_hex(text);
}

StageStatus run_stage(const std::string& stage, const ExperimentConfig& cfg, const Workspace& ws,
                      const RunOptions& options) {
  std::ostream& log = options.log ? *options.log : null_stream();
  cfg.validate();
  stage_info(stage);
  verify_dependencies(stage, cfg, ws);
  const std::string hash = stage_config_hash(cfg, stage);
  if (const auto m = ws.read_manifest(stage)) {
    if (m->config_hash == hash && ws.integrity_problem(*m).empty()) {
      log << stage << ": up to date\n";
      return StageStatus::up_to_date;
    }
    if (m->config_hash != hash && !options.force)
      throw ConfigError(stage + ": existing artifacts were produced by a different config; rerun with --force to overwrite");
  }
  WorkspaceLock lock(ws);
  const fs::path dir = ws.stage_dir(stage);
  ws.remove_manifest(stage);
  fs::remove_all(dir);
  fs::create_directories(dir);
  Ctx ctx{cfg, ws, log, dir, {}};
  stage_functions().at(stage)(ctx);
  ws.write_manifest(stage, hash, list_files(dir), ctx.info);
  log << stage << ": done\n";
  return StageStatus::ran;
}

void run_all(const ExperimentConfig& cfg, const Workspace& ws, const RunOptions& options) {
  for (const auto& s : stage_table()) run_stage(s.name, cfg, ws, options);
}

// ---------------------------------------------------------------- evaluation helpers

Models Models::load(const Workspace& ws) {
  Models m;
  m.den = diffusion::load_denoiser(ws.stage_dir("train-diffusion") / "denoiser.dlc");
  m.sae = sae::load_sae(ws.stage_dir("train-sae") / "sae.dlc");
  const auto dir = ws.stage_dir("train-probe");
  m.oracle_a = probe::load_oracle(dir / "oracle_attr_a.dlc");
  m.oracle_b = probe::load_oracle(dir / "oracle_attr_b.dlc");
  m.probe_a = probe::load_probe(dir / "probe_attr_a.dlc");
  m.probe_b = probe::load_probe(dir / "probe_attr_b.dlc");
  m.pca = metrics::load_pca(dir / "pca.dlc");
  const auto w = core::Archive::load(dir / "whitener.dlc");
  m.whitener = {w.get("mean").flat(), w.get("scale").flat()};
  m.reference = synth::image_matrix(synth::load_dataset(ws.stage_dir("gen-data") / "heldout"));
  return m;
}

const probe::OracleParams& Models::oracle(const std::string& attribute) const {
  if (attribute == "attr_a") return oracle_a;
  if (attribute == "attr_b") return oracle_b;
  throw ConfigError("unknown attribute '" + attribute + "'");
}

MatrixXd generate(const Models& models, std::size_t n, std::uint64_t seed, const diffusion::Hook& hook) {
  const auto imgs = diffusion::sample(models.den.params, models.den.schedule, n, seed, hook);
  MatrixXd out(models.den.params.arch.pixels(), static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i) out.col(static_cast<Eigen::Index>(i)) = imgs[i].flat();
  return out;
}

double class_ratio(const Models& models, const MatrixXd& images, const std::string& attribute, int cls) {
  const auto labels = probe::oracle_labels(images, models.oracle(attribute));
  return static_cast<double>(std::count(labels.begin(), labels.end(), cls)) / static_cast<double>(labels.size());
}

int minority_class(const ExperimentConfig& cfg) {
  return cfg.data.attr_a_probs[1] < cfg.data.attr_a_probs[0] ? 1 : 0;
}

intervention::InterventionSpec steering_spec(const std::string& attribute, int num_classes, int cls,
                                             const std::vector<int>& features, double beta, intervention::Mode mode,
                                             std::uint64_t seed) {
  intervention::InterventionSpec spec;
  spec.attribute = attribute;
  spec.seed = seed;
  for (int k = 0; k < num_classes; ++k) {
    if (k == cls) spec.entries.push_back({features, beta, mode});
    else spec.entries.push_back({{}, intervention::identity_beta(mode), mode});
    spec.probs.push_back(k == cls ? 1.0 : 0.0);
  }
  return spec;
}

intervention::CalibrationResult calibrate_features(const Models& models, const ExperimentConfig& cfg,
                                                   const std::vector<int>& features, int cls, std::uint64_t seed) {
  const auto& c = cfg.intervention;
  const auto mode = intervention::parse_mode(c.mode);
  const int k = num_classes(c.attribute);
  auto ratio_at = [&](double beta) {
    const auto spec = steering_spec(c.attribute, k, cls, features, beta, mode, seed);
    return class_ratio(models, generate(models, static_cast<std::size_t>(c.samples), seed,
                                        intervention::make_hook(spec, models.sae)),
                       c.attribute, cls);
  };
  return intervention::calibrate_beta(ratio_at, c.target_ratio, c.beta_lo, c.beta_hi, c.tolerance, c.max_iter);
}

RunMetrics evaluate_images(const Models& models, const MatrixXd& images, const MatrixXd& unedited, int cls) {
  RunMetrics r;
  r.n = static_cast<std::size_t>(images.cols());
  const MatrixXd probs = probe::oracle_classify_batch(images, models.oracle_a);
  for (Eigen::Index j = 0; j < probs.cols(); ++j) r.count_pos += probe::argmax(probs.col(j)) == cls ? 1 : 0;
  r.ratio = static_cast<double>(r.count_pos) / static_cast<double>(r.n);
  r.fd = metrics::fairness_discrepancy(probs).fd;
  r.frechet = metrics::desk_frechet(images, models.reference, models.pca).value;
  const auto sim = metrics::pairwise_similarity(unedited, images, models.whitener);
  r.similarity = sim.mean;
  r.similarity_skipped = sim.skipped;
  return r;
}

metrics::ControlCurve run_control_curve(const Models& models, const ExperimentConfig& cfg,
                                        const std::vector<int>& features, int cls, std::uint64_t seed) {
  const auto& e = cfg.evaluation;
  const auto n = static_cast<std::size_t>(e.curve_samples);
  const MatrixXd unedited = generate(models, n, seed);
  const auto mode = intervention::parse_mode(cfg.intervention.mode);
  return metrics::control_curve(metrics::log_grid(e.curve_lo, e.curve_hi, e.curve_points), [&](double beta) {
    const auto spec = steering_spec(cfg.intervention.attribute, num_classes(cfg.intervention.attribute), cls, features,
                                    beta, mode, seed);
    const MatrixXd imgs = generate(models, n, seed, intervention::make_hook(spec, models.sae));
    const auto m = evaluate_images(models, imgs, unedited, cls);
    metrics::CurvePoint p;
    p.n = m.n;
    p.count_pos = m.count_pos;
    p.ratio = m.ratio;
    p.log_ratio = metrics::smoothed_log_ratio(m.count_pos, m.n - m.count_pos);
    p.frechet = m.frechet;
    p.similarity = m.similarity;
    return p;
  });
}

}  // namespace difflens::pipeline
