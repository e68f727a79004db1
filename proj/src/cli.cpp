#include "manpp/cli.hpp"

#include <CLI11.hpp>
#include <algorithm>
#include <filesystem>
#include <json.hpp>
#include <map>
#include <set>
#include <sstream>

#include "manpp/analysis.hpp"
#include "manpp/cost_model.hpp"
#include "manpp/data.hpp"
#include "manpp/errors.hpp"
#include "manpp/model_file.hpp"
#include "manpp/pipeline.hpp"
#include "manpp/report.hpp"
#include "manpp/trainer.hpp"

namespace manpp {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

struct RunOptions {
  std::string model_path;
  std::size_t K = 0;  // 0: take it from the model file

  std::string data = "blobs";
  std::string train_images, train_labels, test_images, test_labels, train_csv, test_csv;
  std::size_t limit = 0, test_limit = 0;
  BlobSpec blobs{2, 2, 1000, 0.5};
  std::size_t n_test = 200;
  std::string normalization = "none";

  TrainConfig train;
  std::string optimizer = "sgd";
  std::string schedule = "cosine";
  std::string coupling = "literal";

  std::string out = "manpp_out";
  bool timing = false;

  std::size_t queue_capacity = 2;
  bool free_running = false;
  long timeout_ms = 30000;

  CostParams cost;
  bool probe_after_train = false;
  std::size_t feature_rows = 256;
};

struct Inputs {
  ModelFile model;
  Dataset train;
  std::optional<Dataset> test;
};

void add_options(CLI::App& app, RunOptions& o) {
  app.add_option("--model", o.model_path, "network description file")->check(CLI::ExistingFile);
  app.add_option("--K", o.K, "number of blocks (default: the model file's partition line)");

  app.add_option("--data", o.data, "dataset source")->check(CLI::IsMember({"blobs", "digits", "idx", "csv"}));
  app.add_option("--train-images", o.train_images, "IDX training images")->check(CLI::ExistingFile);
  app.add_option("--train-labels", o.train_labels, "IDX training labels")->check(CLI::ExistingFile);
  app.add_option("--test-images", o.test_images, "IDX test images")->check(CLI::ExistingFile);
  app.add_option("--test-labels", o.test_labels, "IDX test labels")->check(CLI::ExistingFile);
  app.add_option("--train-csv", o.train_csv, "CSV training data")->check(CLI::ExistingFile);
  app.add_option("--test-csv", o.test_csv, "CSV test data")->check(CLI::ExistingFile);
  app.add_option("--limit", o.limit, "read at most this many training records (0: all)");
  app.add_option("--test-limit", o.test_limit, "read at most this many test records (0: all)");
  app.add_option("--classes", o.blobs.classes, "blobs: number of classes");
  app.add_option("--dim", o.blobs.dim, "blobs: feature dimension");
  app.add_option("--n", o.blobs.n, "blobs/digits: training records");
  app.add_option("--n-test", o.n_test, "blobs/digits: test records");
  app.add_option("--noise", o.blobs.noise, "blobs: noise scale");
  app.add_option("--normalize", o.normalization)->check(CLI::IsMember({"none", "standardize"}));

  auto& t = o.train;
  app.add_option("--lr", t.lr_local, "backbone learning rate");
  app.add_option("--lr-aux", t.lr_aux, "auxiliary learning rate");
  app.add_option("--epochs", t.epochs);
  app.add_option("--batch-size", t.batch_size);
  app.add_option("--seed", t.seed);
  app.add_option("--optimizer", o.optimizer)->check(CLI::IsMember({"sgd", "adam"}));
  app.add_option("--momentum", t.optimizer.momentum);
  app.add_option("--weight-decay", t.optimizer.weight_decay);
  app.add_option("--beta1", t.optimizer.beta1);
  app.add_option("--beta2", t.optimizer.beta2);
  app.add_option("--adam-eps", t.optimizer.eps);
  app.add_option("--schedule", o.schedule)->check(CLI::IsMember({"cosine", "constant"}));
  app.add_option("--alpha", t.head.alpha, "EMA decay");
  app.add_option("--coupling", o.coupling)->check(CLI::IsMember({"literal", "convex"}));
  app.add_option("--use-ema", t.head.use_ema);
  app.add_option("--use-lb", t.head.use_lb);
  app.add_option("--use-scalable", t.head.use_scalable);

  app.add_option("--out", o.out, "output directory");
  app.add_flag("--timing", o.timing, "record wall-clock times in metrics.csv");
  app.add_option("--queue-capacity", o.queue_capacity);
  app.add_flag("--free-running", o.free_running, "pipeline without the per-tick barrier");
  app.add_option("--timeout-ms", o.timeout_ms, "free-running deadlock timeout");

  auto& c = o.cost;
  app.add_option("--L", c.L, "cost: parametric layers");
  app.add_option("--eps", c.eps, "cost: FLOPs budget");
  app.add_option("--beta", c.beta, "cost: bias-to-mirror parameter ratio");
  app.add_option("--beta-f", c.beta_f, "cost: bias FLOPs ratio");
  app.add_option("--beta-a", c.beta_a, "cost: bias activation ratio");
  app.add_option("--p-min", c.p_min);
  app.add_option("--p-max", c.p_max);
  app.add_option("--p-bar", c.p_bar);
  app.add_option("--rho-mem", c.rho_mem, "cost: target memory ratio");

  app.add_flag("--probe-after-train", o.probe_after_train, "probe: train for --epochs first");
  app.add_option("--feature-rows", o.feature_rows, "cka: evaluation rows");
}

/// Every option as key=value; re-reading it reproduces the run.
std::vector<std::pair<std::string, std::string>> config_echo(const CLI::App& app) {
  static const std::set<std::string> flags{"timing", "free-running", "probe-after-train"};
  std::vector<std::pair<std::string, std::string>> out;
  for (const CLI::Option* opt : app.get_options()) {
    const auto& names = opt->get_lnames();
    if (names.empty() || names.front() == "help" || names.front() == "config") continue;
    std::string value;
    if (flags.count(names.front())) {
      value = opt->as<bool>() ? "true" : "false";
    } else if (opt->count() > 0) {
      const auto& res = opt->results();
      for (std::size_t i = 0; i < res.size(); ++i) value += (i ? " " : "") + res[i];
    } else {
      value = opt->get_default_str();
    }
    out.emplace_back(names.front(), value);
  }
  return out;
}

std::string config_ini(const std::vector<std::pair<std::string, std::string>>& echo) {
  std::ostringstream os;
  for (const auto& [k, v] : echo) {
    if (v.empty()) continue;
    os << k << '=' << v << '\n';
  }
  return os.str();
}

json config_json(const std::vector<std::pair<std::string, std::string>>& echo) {
  json j = json::object();
  for (const auto& [k, v] : echo) j[k] = v;
  return j;
}

void finalize(RunOptions& o) {
  o.train.optimizer.kind = o.optimizer == "adam" ? OptimizerKind::adam : OptimizerKind::sgd_nesterov;
  o.train.schedule = o.schedule == "constant" ? Schedule::constant : Schedule::cosine;
  o.train.head.coupling = o.coupling == "convex" ? CouplingMode::convex : CouplingMode::literal;
}

std::size_t block_count(const RunOptions& o, const ModelFile& mf) {
  if (o.K) return o.K;
  if (mf.partition) return *mf.partition;
  throw ConfigError("block count not given: pass --K or add a 'partition' line to the model file");
}

Inputs load_inputs(const RunOptions& o) {
  if (o.model_path.empty()) throw ConfigError("--model is required for this subcommand");
  Inputs in;
  in.model = parse_model_file(o.model_path);
  auto data_rng = make_stream(o.train.seed, "data");

  if (o.data == "blobs") {
    auto [train, test] = gen_blobs_split(o.blobs, o.n_test, data_rng);
    in.train = std::move(train);
    if (o.n_test) in.test = std::move(test);
  } else if (o.data == "digits") {
    const auto all = to_dataset(gen_digit_images(o.blobs.n + o.n_test, data_rng));
    in.train = all.slice(0, o.blobs.n);
    if (o.n_test) in.test = all.slice(o.blobs.n, o.n_test);
  } else if (o.data == "idx") {
    if (o.train_images.empty() || o.train_labels.empty()) {
      throw ConfigError("--data idx needs --train-images and --train-labels");
    }
    in.train = load_idx_dataset(o.train_images, o.train_labels, o.limit);
    if (!o.test_images.empty() || !o.test_labels.empty()) {
      if (o.test_images.empty() || o.test_labels.empty()) {
        throw ConfigError("--test-images and --test-labels go together");
      }
      in.test = load_idx_dataset(o.test_images, o.test_labels, o.test_limit);
    }
  } else {
    if (o.train_csv.empty()) throw ConfigError("--data csv needs --train-csv");
    in.train = parse_csv(o.train_csv);
    if (o.limit && o.limit < in.train.size()) in.train = in.train.slice(0, o.limit);
    if (!o.test_csv.empty()) {
      in.test = parse_csv(o.test_csv);
      if (o.test_limit && o.test_limit < in.test->size()) in.test = in.test->slice(0, o.test_limit);
    }
  }

  const std::size_t classes = in.model.output_width();
  in.train.classes = classes;
  in.train.validate();
  if (in.test) {
    in.test->classes = classes;
    in.test->validate();
    if (in.test->sample_shape != in.train.sample_shape) throw ConfigError("train and test samples differ in shape");
  }
  if (in.model.input && *in.model.input != in.train.sample_shape) {
    throw ConfigError("model expects input " + shape_str(*in.model.input) + " but the data has samples of shape " +
                      shape_str(in.train.sample_shape));
  }
  Shape s = in.train.batch_shape(1);
  try {
    for (const auto& l : in.model.layers) s = l.output_shape(s);
  } catch (const ShapeError& e) {
    throw ConfigError(std::string("model does not fit the data: ") + e.what());
  }
  normalize(o.normalization == "standardize" ? Normalization::standardize : Normalization::none, in.train,
            in.test ? &*in.test : nullptr);
  return in;
}

LocalModel build(const RunOptions& o, const ModelFile& mf, std::size_t K) {
  auto init = make_stream(o.train.seed, "init");
  std::vector<LayerSpec> layers;
  for (const auto& l : mf.layers) layers.push_back(l.clone());
  return build_local_model(std::move(layers), K, mf.output_width(), o.train, init);
}

json final_blocks(const EpochMetrics& e) {
  json arr = json::array();
  for (std::size_t j = 0; j < e.blocks.size(); ++j) {
    arr.push_back({{"block", j}, {"loss", e.blocks[j].loss}, {"acc", e.blocks[j].acc}});
  }
  return arr;
}

struct Outputs {
  fs::path dir;
  json summary = json::object();
  std::vector<std::pair<std::string, std::string>> echo;

  void write(const std::string& name, const std::string& text) const {
    fs::create_directories(dir);
    write_text(dir / name, text);
  }
  void finish() {
    summary["config"] = config_json(echo);
    write("summary.json", summary.dump(2) + "\n");
    write("config.ini", config_ini(echo));
  }
};

void run_train(const RunOptions& o, std::size_t forced_k, Outputs& out, std::ostream& log) {
  const auto in = load_inputs(o);
  const std::size_t K = forced_k ? forced_k : block_count(o, in.model);
  auto model = build(o, in.model, K);
  const auto result = train_sequential(model, in.train, in.test ? &*in.test : nullptr, o.train);
  out.write("metrics.csv", metrics_csv(result.epochs, o.timing));
  out.summary["blocks"] = K;
  out.summary["train_records"] = in.train.size();
  out.summary["test_records"] = result.test_records;
  if (in.test) out.summary["test_accuracy"] = result.test_accuracy;
  out.summary["final"] = final_blocks(result.epochs.back());
  out.summary["peak_scalars"] = result.epochs.back().peak_scalars;
  log << "trained K=" << K << " for " << o.train.epochs << " epoch(s) on " << in.train.size() << " records";
  if (in.test) log << "; test accuracy " << format_double(result.test_accuracy);
  log << '\n';
}

void run_pipeline_mode(const RunOptions& o, Outputs& out, std::ostream& log) {
  const auto in = load_inputs(o);
  const std::size_t K = block_count(o, in.model);
  if (K < 2) throw ConfigError("pipeline needs K >= 2 blocks; use 'train' or 'e2e' for K = 1");
  auto model = build(o, in.model, K);
  PipelineConfig pc;
  pc.queue_capacity = o.queue_capacity;
  pc.deterministic = !o.free_running;
  pc.timeout = std::chrono::milliseconds(o.timeout_ms);
  const auto result = run_pipeline(model, in.train, o.train, pc);
  const auto stats = throughput_report(result.trace);
  out.write("metrics.csv", metrics_csv(result.epochs, o.timing));
  out.write("pipeline_stats.csv", pipeline_stats_csv(stats));
  out.summary["blocks"] = K;
  out.summary["train_records"] = in.train.size();
  out.summary["final"] = final_blocks(result.epochs.back());
  out.summary["messages_per_edge"] = stats.messages_per_edge;
  out.summary["fill_drain_overhead"] = stats.fill_drain_overhead;
  out.summary["max_snapshot_staleness"] = result.max_snapshot_staleness;
  if (in.test) {
    const double acc = evaluate(model, *in.test);
    out.summary["test_records"] = in.test->size();
    out.summary["test_accuracy"] = acc;
    log << "pipeline K=" << K << " test accuracy " << format_double(acc) << '\n';
  }
}

void run_cka(const RunOptions& o, Outputs& out, std::ostream& log) {
  const auto in = load_inputs(o);
  const std::size_t K = block_count(o, in.model);
  auto local = build(o, in.model, K);
  auto e2e = build(o, in.model, 1);
  train_sequential(local, in.train, nullptr, o.train);
  train_sequential(e2e, in.train, nullptr, o.train);
  const Dataset& eval = in.test ? *in.test : in.train;
  const std::size_t rows = std::min(o.feature_rows, eval.size());
  std::vector<std::size_t> idx(rows);
  for (std::size_t i = 0; i < rows; ++i) idx[i] = i;
  std::vector<int> labels;
  const Tensor x = eval.batch(idx, labels);
  const auto a = unit_features(local, x);
  const auto b = unit_features(e2e, x);
  std::vector<double> scores;
  for (std::size_t i = 0; i < a.size(); ++i) scores.push_back(linear_cka(a[i], b[i]));
  out.write("cka.csv", cka_csv(scores));
  out.summary["blocks"] = K;
  out.summary["rows"] = rows;
  out.summary["cka"] = scores;
  log << "layer-wise CKA against end-to-end training written for " << scores.size() << " layers\n";
}

void run_probe(const RunOptions& o, Outputs& out, std::ostream& log) {
  const auto in = load_inputs(o);
  const std::size_t K = block_count(o, in.model);
  auto model = build(o, in.model, K);
  if (o.probe_after_train) train_sequential(model, in.train, nullptr, o.train);
  const std::size_t rows = std::min(o.train.batch_size, in.train.size());
  std::vector<std::size_t> idx(rows);
  for (std::size_t i = 0; i < rows; ++i) idx[i] = i;
  std::vector<int> labels;
  const Tensor x = in.train.batch(idx, labels);
  const auto bias = gradient_bias_probe(model, x, labels);
  out.write("probe.csv", probe_csv(bias));
  out.summary["blocks"] = K;
  out.summary["rows"] = rows;
  out.summary["bias"] = bias;
  for (std::size_t j = 0; j < bias.size(); ++j) log << "block " << j << " gradient bias " << format_double(bias[j]) << '\n';
}

void run_cost(const RunOptions& o, Outputs& out, std::ostream& log) {
  CostReport r;
  if (!o.model_path.empty()) {
    const auto mf = parse_model_file(o.model_path);
    if (!mf.input) throw ConfigError("cost --model needs an 'input' line in the model file");
    auto model = build(o, mf, block_count(o, mf));
    r = verify_against_model(model, *mf.input, o.train.batch_size, o.cost);
  } else {
    CostParams p = o.cost;
    p.K = o.K ? o.K : 1;
    r = cost_report(p);
  }
  out.write("cost.json", cost_report_json(r));
  out.summary = json::parse(cost_report_json(r));
  log << cost_report_table(r);
}

void run_gen_digits(const RunOptions& o, std::ostream& log) {
  auto rng = make_stream(o.train.seed, "data");
  const auto d = gen_digit_images(o.blobs.n + o.n_test, rng);
  const fs::path dir = o.out;
  const std::size_t px = 28 * 28;
  auto dump = [&](const std::string& prefix, std::size_t begin, std::size_t count) {
    write_idx_images(dir / (prefix + "-images.idx"), count, 28, 28,
                     std::span(d.pixels).subspan(begin * px, count * px));
    write_idx_labels(dir / (prefix + "-labels.idx"), std::span(d.labels).subspan(begin, count));
  };
  dump("train", 0, o.blobs.n);
  if (o.n_test) dump("test", o.blobs.n, o.n_test);
  log << "wrote " << o.blobs.n << " training and " << o.n_test << " test digits to " << dir.string() << '\n';
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Local learning with momentum auxiliary networks", "manpp"};
  app.set_config("--config", "", "key=value file; command-line flags take precedence");
  app.option_defaults()->always_capture_default();
  RunOptions o;
  add_options(app, o);
  app.require_subcommand(1);
  app.fallthrough();
  auto* train = app.add_subcommand("train", "sequential block-wise training");
  auto* pipe = app.add_subcommand("pipeline", "pipeline-parallel training, one thread per block");
  auto* e2e = app.add_subcommand("e2e", "end-to-end training (one block, no heads)");
  auto* cost = app.add_subcommand("cost", "closed-form cost model, optionally checked against --model");
  auto* cka = app.add_subcommand("cka", "layer-wise CKA between local and end-to-end training");
  auto* probe = app.add_subcommand("probe", "local vs end-to-end gradient discrepancy per block");
  auto* gen = app.add_subcommand("gen-digits", "write a synthetic digit set as IDX files");

  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    app.parse(rev);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n" << "run with --help for usage\n";
    return kExitConfig;
  }

  try {
    finalize(o);
    o.train.validate();
    Outputs outputs;
    outputs.dir = o.out;
    outputs.echo = config_echo(app);
    if (*gen) {
      fs::create_directories(outputs.dir);
      run_gen_digits(o, out);
      return kExitOk;
    }
    if (*train) {
      outputs.summary["mode"] = "sequential";
      run_train(o, 0, outputs, out);
    } else if (*e2e) {
      outputs.summary["mode"] = "e2e";
      run_train(o, 1, outputs, out);
    } else if (*pipe) {
      outputs.summary["mode"] = "pipeline";
      run_pipeline_mode(o, outputs, out);
    } else if (*cka) {
      outputs.summary["mode"] = "cka";
      run_cka(o, outputs, out);
    } else if (*probe) {
      outputs.summary["mode"] = "probe";
      run_probe(o, outputs, out);
    } else if (*cost) {
      run_cost(o, outputs, out);
      outputs.summary["mode"] = "cost";
    }
    outputs.finish();
    return kExitOk;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "run aborted: " << e.what() << '\n';
    return kExitRuntime;
  }
}

}  // namespace manpp
