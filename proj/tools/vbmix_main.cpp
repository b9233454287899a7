// Command-line front end: simulate / train / translate / evaluate.
//
// Exit codes: 0 success, 1 usage error, 2 data/validation error,
// 3 numerical failure.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "vbmix/errors.hpp"
#include "vbmix/population.hpp"
#include "vbmix/rng.hpp"
#include "vbmix/subject.hpp"
#include "vbmix/translate.hpp"
#include "vbmix/volume.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace vbmix;

namespace {

void log_kv(const std::string& key, const std::string& value) {
  std::cerr << key << "=" << value << "\n";
}

template <typename T>
void log_kv(const std::string& key, T value) {
  std::ostringstream os;
  os << value;
  log_kv(key, os.str());
}

int default_jobs() {
  if (const char* env = std::getenv("VBMIX_JOBS")) {
    try {
      const int j = std::stoi(env);
      if (j >= 1) return j;
    } catch (...) {
    }
    throw ValidationError("VBMIX_JOBS must be a positive integer");
  }
  return 1;
}

std::string stem_of(const std::string& path) {
  fs::path p(path);
  if (p.extension() == ".json") p.replace_extension();
  return p.string();
}

// Atomic file write: temp file in the same directory, then rename.
void write_text_atomic(const std::string& path, const std::string& text) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary);
    if (!f) throw ValidationError("cannot write " + tmp);
    f << text;
  }
  fs::rename(tmp, path);
}

// Volumes are two files; write both under a temp stem, then rename.
void write_volume_atomic(const MultiChannelVolume& vol,
                         const std::string& stem) {
  const std::string tmp = stem + ".tmp";
  write_volume(vol, tmp);
  fs::rename(tmp + ".json", stem + ".json");
  fs::rename(tmp + ".raw", stem + ".raw");
}

PhantomSpec phantom_spec_from_json(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ValidationError("cannot open phantom spec " + path);
  json j;
  try {
    j = json::parse(f);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("phantom spec parse error: ") +
                          e.what());
  }
  PhantomSpec spec;
  try {
    const auto dims = j.at("dims");
    if (dims.size() != 3)
      throw ValidationError("phantom spec: dims must have 3 entries");
    for (int i = 0; i < 3; ++i) spec.dims[i] = dims.at(i).get<int>();
    spec.channels = j.at("channels").get<int>();
    spec.num_classes = j.at("num_classes").get<int>();
    for (const auto& m : j.at("means")) {
      Eigen::VectorXd mu(m.size());
      for (std::size_t i = 0; i < m.size(); ++i) mu[i] = m.at(i).get<double>();
      spec.means.push_back(mu);
    }
    for (const auto& cov : j.at("covariances")) {
      Eigen::MatrixXd C(cov.size(), cov.size());
      for (std::size_t r = 0; r < cov.size(); ++r)
        for (std::size_t c = 0; c < cov.at(r).size(); ++c)
          C(r, c) = cov.at(r).at(c).get<double>();
      spec.covariances.push_back(C);
    }
    const auto& probs = j.at("class_probs");
    spec.class_probs.resize(probs.size(), spec.num_classes);
    for (std::size_t r = 0; r < probs.size(); ++r)
      for (std::size_t c = 0; c < probs.at(r).size(); ++c)
        spec.class_probs(r, c) = probs.at(r).at(c).get<double>();
    if (j.contains("seed")) spec.seed = j.at("seed").get<std::uint64_t>();
  } catch (const json::exception& e) {
    throw ValidationError(std::string("phantom spec field error: ") +
                          e.what());
  }
  spec.validate();
  return spec;
}

json phantom_spec_to_json(const PhantomSpec& spec) {
  json j;
  j["dims"] = {spec.dims[0], spec.dims[1], spec.dims[2]};
  j["channels"] = spec.channels;
  j["num_classes"] = spec.num_classes;
  json means = json::array();
  for (const auto& m : spec.means)
    means.push_back(std::vector<double>(m.data(), m.data() + m.size()));
  j["means"] = means;
  json covs = json::array();
  for (const auto& C : spec.covariances) {
    json rows = json::array();
    for (int r = 0; r < C.rows(); ++r) {
      json row = json::array();
      for (int c = 0; c < C.cols(); ++c) row.push_back(C(r, c));
      rows.push_back(row);
    }
    covs.push_back(rows);
  }
  j["covariances"] = covs;
  json probs = json::array();
  for (int r = 0; r < spec.class_probs.rows(); ++r) {
    json row = json::array();
    for (int c = 0; c < spec.class_probs.cols(); ++c)
      row.push_back(spec.class_probs(r, c));
    probs.push_back(row);
  }
  j["class_probs"] = probs;
  j["seed"] = spec.seed;
  return j;
}

int cmd_simulate(const std::string& spec_path, int n, std::uint64_t seed,
                 const std::string& out_dir) {
  PhantomSpec spec = phantom_spec_from_json(spec_path);
  fs::create_directories(out_dir);
  json manifest;
  manifest["seed"] = seed;
  manifest["n"] = n;
  manifest["generator"] = phantom_spec_to_json(spec);
  json subjects = json::array();
  for (int i = 0; i < n; ++i) {
    PhantomSpec s = spec;
    s.seed = seed + static_cast<std::uint64_t>(i);
    const Phantom phantom = generate_phantom(s);
    std::ostringstream name;
    name << "subject_" << i;
    const std::string stem = (fs::path(out_dir) / name.str()).string();
    write_volume_atomic(phantom.volume, stem);
    json labels = phantom.labels;
    write_text_atomic(stem + "_labels.json", labels.dump() + "\n");
    subjects.push_back({{"name", name.str()}, {"seed", s.seed}});
    log_kv("simulate.subject", name.str());
  }
  manifest["subjects"] = subjects;
  write_text_atomic((fs::path(out_dir) / "manifest.json").string(),
                    manifest.dump(2) + "\n");
  log_kv("simulate.count", n);
  return 0;
}

TemplatePrior load_template(const std::string& path, int K) {
  if (path.empty()) return TemplatePrior::stationary_uniform(K);
  std::ifstream f(path);
  if (!f) throw ValidationError("cannot open template " + path);
  json j;
  try {
    j = json::parse(f);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("template parse error: ") + e.what());
  }
  TemplatePrior tmpl;
  const auto& logits = j.at("logits");
  if (static_cast<int>(logits.size()) != K)
    throw ValidationError("template logits length must equal --k");
  tmpl.logits.resize(1, K);
  for (int k = 0; k < K; ++k) tmpl.logits(0, k) = logits.at(k).get<double>();
  tmpl.omega = Eigen::VectorXd::Zero(K);
  if (j.contains("omega"))
    for (int k = 0; k < K; ++k) tmpl.omega[k] = j["omega"].at(k).get<double>();
  return tmpl;
}

int cmd_train(const std::vector<std::string>& inputs, int K,
              const std::string& template_path, std::uint64_t seed,
              int outer_iters, int inner_iters, const std::string& eq16,
              const std::string& out, int jobs) {
  if (inputs.empty()) throw ValidationError("train needs >= 1 input volume");
  std::vector<MultiChannelVolume> volumes;
  for (const auto& p : inputs) volumes.push_back(read_volume(stem_of(p)));
  for (const auto& v : volumes)
    if (v.channels != volumes.front().channels)
      throw ValidationError("channel-count mismatch across subjects");

  TrainOptions options;
  options.outer_iters = outer_iters;
  options.inner.max_iters = inner_iters;
  options.inner.eq16 = eq16_variant_from_string(eq16);
  options.seed = seed;
  options.jobs = jobs;
  const TemplatePrior tmpl = load_template(template_path, K);

  log_kv("train.subjects", volumes.size());
  log_kv("train.k", K);
  const TrainResult result = train_population(volumes, tmpl, K, options);
  write_text_atomic(out, model_to_json(result.model));

  std::ostringstream trace;
  trace << "iteration,elbo\n";
  for (std::size_t i = 0; i < result.combined_elbo.size(); ++i)
    trace << i << ',' << std::setprecision(17) << result.combined_elbo[i]
          << '\n';
  write_text_atomic(stem_of(out) + "_elbo.csv", trace.str());
  log_kv("train.final_elbo", result.model.metadata.final_elbo);
  return 0;
}

std::string observed_set_descriptor(const MultiChannelVolume& vol) {
  std::ostringstream os;
  os << "obs:";
  bool first = true;
  for (int c = 0; c < vol.channels; ++c) {
    bool any = false;
    for (std::int64_t d = 0; d < vol.voxel_count() && !any; ++d)
      any = !vol.is_missing(d, c);
    if (any) {
      os << (first ? "" : "+") << c;
      first = false;
    }
  }
  return os.str();
}

int cmd_translate(const std::string& model_path, const std::string& in,
                  const std::string& ref, const std::string& out_dir) {
  const TrainedModel model = load_model(model_path);
  const MultiChannelVolume vol = read_volume(stem_of(in));
  if (vol.channels != model.channels)
    throw ValidationError("volume channel count does not match model");
  fs::create_directories(out_dir);

  FitOptions options;
  auto [post, trace] = fit_subject(vol, model.hyper, model.tmpl, options);
  const PredictionResult pred = predict_missing(vol, post);
  write_volume_atomic(pred.completed,
                      (fs::path(out_dir) / "completed").string());
  write_volume_atomic(pred.variance,
                      (fs::path(out_dir) / "uncertainty").string());
  log_kv("translate.iterations", trace.iterations.size());

  if (!ref.empty()) {
    const MultiChannelVolume reference = read_volume(stem_of(ref));
    EvalReport report;
    const std::string cond = observed_set_descriptor(vol);
    for (int c = 0; c < vol.channels; ++c) {
      EvalRow row;
      row.experiment = "translate";
      row.subject = fs::path(stem_of(in)).filename().string();
      row.channel = c;
      row.condition = cond;
      row.score = psnr(reference, pred.completed, c);
      row.seconds = 0.0;
      report.rows.push_back(row);
      log_kv("translate.psnr_db", row.score.infinite
                                      ? std::string("inf")
                                      : std::to_string(row.score.db));
    }
    std::ostringstream csv;
    write_report_csv(report, csv);
    write_text_atomic((fs::path(out_dir) / "report.csv").string(), csv.str());
  }
  return 0;
}

int cmd_evaluate(const std::string& mode, const std::string& model_path,
                 const std::vector<std::string>& inputs,
                 const std::vector<double>& fractions, const std::string& out,
                 int jobs) {
  const TrainedModel model = load_model(model_path);
  if (inputs.empty())
    throw ValidationError("evaluate needs >= 1 input volume");
  std::vector<MultiChannelVolume> volumes;
  for (const auto& p : inputs) volumes.push_back(read_volume(stem_of(p)));

  ExperimentOptions options;
  options.jobs = jobs;
  EvalReport report;
  if (mode == "fov") {
    // Mask every channel but the last so predictions stay anchored to at
    // least one observed contrast (all channels when M == 1).
    std::vector<int> channels;
    for (int c = 0; c + 1 < model.channels; ++c) channels.push_back(c);
    if (channels.empty()) channels.push_back(0);
    report = run_fov_experiment(model, volumes, channels, fractions, options);
  } else if (mode == "dropout") {
    report = run_dropout_experiment(model, volumes, {}, options);
  } else {
    throw ValidationError("evaluate mode must be fov or dropout");
  }
  std::ostringstream csv;
  write_report_csv(report, csv);
  write_text_atomic(out, csv.str());
  log_kv("evaluate.rows", report.rows.size());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Variational mixture modelling of multi-channel volumes "
               "with per-voxel missing channels"};
  app.require_subcommand(1);

  int jobs = 0;  // 0 = use VBMIX_JOBS / 1
  app.add_option("--jobs", jobs, "Worker thread count (default: VBMIX_JOBS)");

  // simulate
  auto* sim = app.add_subcommand("simulate", "Generate synthetic phantoms");
  std::string sim_spec, sim_out;
  int sim_n = 1;
  std::uint64_t sim_seed = 0;
  sim->add_option("--spec", sim_spec, "Phantom spec JSON")->required();
  sim->add_option("--n", sim_n, "Number of subjects")->required();
  sim->add_option("--seed", sim_seed, "Base seed (subject i uses seed+i)");
  sim->add_option("--out", sim_out, "Output directory")->required();

  // train
  auto* train = app.add_subcommand("train", "Learn population hyperpriors");
  std::vector<std::string> train_inputs;
  std::string train_template, train_eq16 = "standard", train_out;
  int train_k = 0, train_outer = 10, train_inner = 5;
  std::uint64_t train_seed = 0;
  train->add_option("--inputs", train_inputs, "Input volume headers")
      ->required()
      ->expected(-1);
  train->add_option("--k", train_k, "Number of mixture classes")->required();
  train->add_option("--template", train_template,
                    "Stationary template logits JSON");
  train->add_option("--seed", train_seed, "Seed");
  train->add_option("--outer-iters", train_outer, "Outer iterations");
  train->add_option("--inner-iters", train_inner,
                    "Subject sweeps per outer iteration");
  train->add_option("--eq16", train_eq16, "Scale update variant")
      ->check(CLI::IsMember({"standard", "as-written"}));
  train->add_option("--out", train_out, "Model JSON path")->required();

  // translate
  auto* tr = app.add_subcommand("translate", "Complete missing channels");
  std::string tr_model, tr_in, tr_ref, tr_out;
  tr->add_option("--model", tr_model, "Trained model JSON")->required();
  tr->add_option("--in", tr_in, "Input volume header")->required();
  tr->add_option("--ref", tr_ref, "Reference volume for PSNR");
  tr->add_option("--out", tr_out, "Output directory")->required();

  // evaluate
  auto* ev = app.add_subcommand("evaluate", "Run masking experiments");
  std::string ev_mode, ev_model, ev_out;
  std::vector<std::string> ev_inputs;
  std::vector<double> ev_fractions{0.25, 0.5, 0.75, 1.0};
  ev->add_option("--mode", ev_mode, "fov or dropout")
      ->required()
      ->check(CLI::IsMember({"fov", "dropout"}));
  ev->add_option("--model", ev_model, "Trained model JSON")->required();
  ev->add_option("--inputs", ev_inputs, "Held-out volume headers")
      ->required()
      ->expected(-1);
  ev->add_option("--fractions", ev_fractions, "Masked fractions")
      ->delimiter(',');
  ev->add_option("--out", ev_out, "Report CSV path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    if (jobs == 0) jobs = default_jobs();
    if (jobs < 1) throw ValidationError("--jobs must be >= 1");
    log_kv("jobs", jobs);
    if (sim->parsed())
      return cmd_simulate(sim_spec, sim_n, sim_seed, sim_out);
    if (train->parsed())
      return cmd_train(train_inputs, train_k, train_template, train_seed,
                       train_outer, train_inner, train_eq16, train_out, jobs);
    if (tr->parsed()) return cmd_translate(tr_model, tr_in, tr_ref, tr_out);
    if (ev->parsed())
      return cmd_evaluate(ev_mode, ev_model, ev_inputs, ev_fractions, ev_out,
                          jobs);
  } catch (const NumericalError& e) {
    log_kv("error.numerical", e.what());
    return 3;
  } catch (const ValidationError& e) {
    log_kv("error.validation", e.what());
    return 2;
  } catch (const std::exception& e) {
    log_kv("error", e.what());
    return 3;
  }
  return 1;
}
