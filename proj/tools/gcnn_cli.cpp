#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "gcnn/errors.hpp"
#include "gcnn/experiment.hpp"
#include "gcnn/kernels.hpp"
#include "gcnn/report.hpp"
#include "gcnn/seed.hpp"

using namespace gcnn;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Global {
  std::optional<std::uint64_t> seed;
  std::optional<std::string> precision;
  int workers = 1;
  std::optional<std::string> config;
};

struct NetworkFlags {
  std::optional<std::string> variant, group, profile;
  std::optional<std::size_t> classes, fc;
  std::vector<std::size_t> widths;
  std::optional<int> gpool_depth;
  std::optional<bool> conv_bias;

  void add(CLI::App* cmd) {
    cmd->add_option("--variant", variant, "z3, g_fc, g_max or g_avg")
        ->check(CLI::IsMember({"z3", "g_fc", "g_max", "g_avg"}));
    cmd->add_option("--group", group, "o, oh, d4 or d4h")->check(CLI::IsMember({"o", "oh", "d4", "d4h", "trivial"}));
    cmd->add_option("--profile", profile, "table1, text or custom")
        ->check(CLI::IsMember({"table1", "text", "custom"}));
    cmd->add_option("--classes", classes, "number of classes")->check(CLI::PositiveNumber);
    cmd->add_option("--widths", widths, "three stage widths")->expected(3);
    cmd->add_option("--fc", fc, "width of the hidden dense layer")->check(CLI::PositiveNumber);
    cmd->add_option("--gpool-depth", gpool_depth, "orientation pooling position 1..4")->check(CLI::Range(1, 4));
    cmd->add_flag("--conv-bias,!--no-conv-bias", conv_bias, "bias on convolution stages");
  }

  // Flags override the base JSON; classes fall back to `default_classes`.
  NetworkSpec resolve(json base, std::optional<std::size_t> default_classes) const {
    if (variant) base["variant"] = *variant;
    if (group) base["group"] = *group;
    if (profile) base["profile"] = *profile;
    if (!widths.empty()) {
      base["channels"] = widths;
      if (!profile) base["profile"] = "custom";
    }
    if (classes)
      base["classes"] = *classes;
    else if (default_classes && !base.contains("classes"))
      base["classes"] = *default_classes;
    if (fc) base["fc_width"] = *fc;
    if (gpool_depth) base["gpool_depth"] = *gpool_depth;
    if (conv_bias) base["conv_bias"] = *conv_bias;
    if (!base.contains("variant")) throw CLI::ValidationError("--variant is required");
    if (base.value("profile", "") == "custom" && !base.contains("channels"))
      throw CLI::ValidationError("--profile custom needs --widths");
    try {
      return NetworkSpec::from_json(base);
    } catch (const json::exception& e) {
      throw FormatError(std::string("network spec: ") + e.what());
    }
  }
};

struct TrainFlags {
  std::optional<double> lr;
  std::optional<std::size_t> epochs, batch_size;

  void add(CLI::App* cmd) {
    cmd->add_option("--lr", lr, "Adam learning rate")->check(CLI::PositiveNumber);
    cmd->add_option("--epochs", epochs, "training epochs")->check(CLI::PositiveNumber);
    cmd->add_option("--batch-size", batch_size, "mini-batch size")->check(CLI::PositiveNumber);
  }
};

json load_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open: " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

json config_json(const Global& g) { return g.config ? load_json(*g.config) : json::object(); }

void echo(const std::string& command, const json& resolved) {
  std::cerr << "config: " << json{{"command", command}, {"config", resolved}}.dump() << std::endl;
}

TrainConfig resolve_train(const Global& g, const NetworkFlags& nf, const TrainFlags& tf, const std::string& manifest,
                          const Manifest& m) {
  const json base = config_json(g);
  TrainConfig cfg;
  try {
    cfg = TrainConfig::from_json(base);
  } catch (const json::exception& e) {
    throw FormatError(std::string("training config: ") + e.what());
  }
  cfg.network = nf.resolve(base.value("network", json::object()), m.classes);
  if (tf.lr) cfg.lr = *tf.lr;
  if (tf.epochs) cfg.epochs = *tf.epochs;
  if (tf.batch_size) cfg.batch_size = *tf.batch_size;
  if (g.seed) cfg.seed = *g.seed;
  if (g.precision) cfg.precision = parse_precision(*g.precision);
  if (!manifest.empty()) cfg.manifest = manifest;
  cfg.validate();
  return cfg;
}

std::string manifest_path(const std::string& flag, const Global& g) {
  if (!flag.empty()) return flag;
  const auto base = config_json(g);
  if (base.contains("manifest")) return base.at("manifest").get<std::string>();
  throw CLI::ValidationError("--manifest is required");
}

template <typename T>
AuditReport audit_random(const NetworkSpec& spec, std::uint64_t seed, std::size_t trials, std::size_t dim) {
  const Network<T> net(spec, seed);
  return audit_equivariance(net, trials, dim, derive_seed(seed, {0x4155}));
}

AuditReport audit_spec(const NetworkSpec& spec, Precision p, std::uint64_t seed, std::size_t trials,
                       std::size_t dim) {
  return p == Precision::f32 ? audit_random<float>(spec, seed, trials, dim)
                             : audit_random<double>(spec, seed, trials, dim);
}

template <typename T>
void train_and_save(const TrainConfig& cfg, const Dataset& data, std::optional<std::size_t> fold,
                    const fs::path& out, const fs::path& log_path) {
  TrainLog log;
  const auto net = train<T>(cfg, data, fold, &log, [&](std::size_t epoch, double loss) {
    std::printf("epoch %zu loss %.6f\n", epoch + 1, loss);
    std::fflush(stdout);
  });
  const json extra{{"held_out_fold", fold ? json(*fold) : json(nullptr)}, {"train_config", cfg.to_json()}};
  save_checkpoint(out, net, fold_seed(cfg.seed, fold), extra);
  write_text(log_path, json{{"config", cfg.to_json()},
                            {"held_out_fold", fold ? json(*fold) : json(nullptr)},
                            {"epoch_loss", log.epoch_loss},
                            {"timing", {{"seconds", log.seconds}}}}
                           .dump(2) +
                           "\n");
}

template <typename T>
EvalResult eval_checkpoint(const fs::path& ckpt, const Dataset& data, SetKind set, std::optional<std::size_t> fold,
                           std::size_t batch) {
  const auto net = load_checkpoint<T>(ckpt);
  return evaluate(net, data, set, fold, batch);
}

template <typename T>
AuditReport audit_checkpoint(const fs::path& ckpt, std::size_t trials, std::size_t dim, std::uint64_t seed) {
  const auto net = load_checkpoint<T>(ckpt);
  return audit_equivariance(net, trials, dim, seed);
}

void ensure_parent(const fs::path& file) {
  if (file.has_parent_path()) fs::create_directories(file.parent_path());
}

int run(int argc, char** argv) {
  CLI::App app{"Group-equivariant 3D CNN experiments"};
  app.require_subcommand(1);
  app.fallthrough();
  Global g;
  app.add_option("--seed", g.seed, "global seed");
  app.add_option("--precision", g.precision, "f32 or f64")->check(CLI::IsMember({"f32", "f64"}));
  app.add_option("--workers", g.workers, "OpenMP workers for kernels and data generation")
      ->check(CLI::PositiveNumber);
  app.add_option("--config", g.config, "JSON configuration; flags override it");

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate a dataset with its manifest");
  std::optional<std::string> preset;
  std::string gen_out;
  std::optional<std::size_t> gen_dim, gen_instances, gen_k;
  bool gen_orot = false, gen_rot = false;
  gen->add_option("--preset", preset, "fourier, geometric or toy-directional")
      ->check(CLI::IsMember({"fourier", "geometric", "toy-directional"}));
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--dim", gen_dim, "volume side")->check(CLI::PositiveNumber);
  gen->add_option("--instances", gen_instances, "instances per class")->check(CLI::PositiveNumber);
  gen->add_flag("--o-rotate", gen_orot, "add the O-rotated set");
  gen->add_flag("--rotate", gen_rot, "add the continuously rotated set");
  gen->add_option("--kfold", gen_k, "assign k folds")->check(CLI::PositiveNumber);

  // split
  auto* split = app.add_subcommand("split", "assign k-fold indices to a manifest");
  std::string split_manifest, split_out;
  std::size_t split_k = 5;
  split->add_option("--manifest", split_manifest, "manifest.json")->required();
  split->add_option("--k", split_k, "number of folds")->check(CLI::PositiveNumber);
  split->add_option("--out", split_out, "output manifest (default: in place)");

  // train
  auto* tr = app.add_subcommand("train", "train one model");
  NetworkFlags tr_net;
  TrainFlags tr_flags;
  std::string tr_manifest, tr_out, tr_log;
  std::optional<std::size_t> tr_fold;
  tr_net.add(tr);
  tr_flags.add(tr);
  tr->add_option("--manifest", tr_manifest, "dataset manifest");
  tr->add_option("--fold", tr_fold, "held-out fold (default: train on all folds)");
  tr->add_option("--out", tr_out, "checkpoint path")->required();
  tr->add_option("--log", tr_log, "training log path (default: <out>.log.json)");

  // cv
  auto* cv = app.add_subcommand("cv", "k-fold cross-validation with exported results");
  NetworkFlags cv_net;
  TrainFlags cv_flags;
  std::string cv_manifest, cv_out, cv_name;
  std::vector<std::string> cv_sets;
  std::size_t cv_audit_trials = 1;
  cv_net.add(cv);
  cv_flags.add(cv);
  cv->add_option("--manifest", cv_manifest, "dataset manifest");
  cv->add_option("--out", cv_out, "export directory")->required();
  cv->add_option("--name", cv_name, "row label in the accuracy table");
  cv->add_option("--sets", cv_sets, "test sets")->check(CLI::IsMember({"normal", "o_rotate", "rotate"}));
  cv->add_option("--audit-trials", cv_audit_trials, "equivariance audit trials on a fresh model (0: skip)");

  // eval
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  std::string ev_ckpt, ev_manifest, ev_set = "normal", ev_out;
  std::optional<std::size_t> ev_fold;
  std::size_t ev_batch = 16;
  ev->add_option("--checkpoint", ev_ckpt, "checkpoint path")->required();
  ev->add_option("--manifest", ev_manifest, "dataset manifest")->required();
  ev->add_option("--set", ev_set, "test set")->check(CLI::IsMember({"normal", "o_rotate", "rotate"}));
  ev->add_option("--fold", ev_fold, "fold (default: all)");
  ev->add_option("--batch-size", ev_batch, "evaluation batch")->check(CLI::PositiveNumber);
  ev->add_option("--out", ev_out, "result JSON path");

  // audit
  auto* au = app.add_subcommand("audit", "equivariance audit of a checkpoint or a fresh model");
  NetworkFlags au_net;
  std::string au_ckpt, au_out;
  std::size_t au_trials = 5, au_dim = 16;
  std::optional<double> au_tol;
  au_net.add(au);
  au->add_option("--checkpoint", au_ckpt, "checkpoint (default: random init from the spec)");
  au->add_option("--trials", au_trials, "random test volumes")->check(CLI::PositiveNumber);
  au->add_option("--dim", au_dim, "volume side")->check(CLI::PositiveNumber);
  au->add_option("--tolerance", au_tol, "exit 3 if the max logit deviation exceeds this");
  au->add_option("--out", au_out, "report JSON path");

  // count-params
  auto* cp = app.add_subcommand("count-params", "closed-form parameter count");
  NetworkFlags cp_net;
  cp_net.add(cp);

  // export
  auto* ex = app.add_subcommand("export", "CSV tables and heatmaps from results.json files");
  std::vector<std::string> ex_results;
  std::string ex_out;
  ex->add_option("--results", ex_results, "[name=]path/to/results.json")->required();
  ex->add_option("--out", ex_out, "export directory")->required();

  // dump-group
  auto* dg = app.add_subcommand("dump-group", "group elements, Cayley table and inverses as JSON");
  std::string dg_kind;
  dg->add_option("--kind", dg_kind, "o, oh, d4 or d4h")
      ->required()
      ->check(CLI::IsMember({"o", "oh", "d4", "d4h", "trivial"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }
  kernels::set_workers(g.workers);
  const json global{{"seed", g.seed ? json(*g.seed) : json(nullptr)},
                    {"precision", g.precision ? json(*g.precision) : json(nullptr)},
                    {"workers", g.workers},
                    {"config", g.config ? json(*g.config) : json(nullptr)}};

  if (*gen) {
    DatasetConfig cfg;
    if (preset)
      cfg = preset_config(*preset);
    else if (g.config) {
      try {
        cfg = DatasetConfig::from_json(config_json(g));
      } catch (const json::exception& e) {
        throw FormatError(std::string("dataset config: ") + e.what());
      }
    } else
      throw CLI::ValidationError("gen-data needs --preset or --config");
    if (gen_dim) cfg.dim = *gen_dim;
    if (gen_instances) cfg.instances_per_class = *gen_instances;
    if (g.seed) cfg.seed = *g.seed;
    cfg.validate();
    if (gen_k && *gen_k > cfg.instances_per_class * cfg.classes.size())
      throw CLI::ValidationError("--kfold exceeds the number of instances");
    echo("gen-data", {{"global", global},
                      {"dataset", cfg.to_json()},
                      {"o_rotate", gen_orot},
                      {"rotate", gen_rot},
                      {"kfold", gen_k ? json(*gen_k) : json(nullptr)},
                      {"out", gen_out}});
    auto data = generate_dataset(cfg);
    if (gen_orot) make_o_rotated(data, cfg.seed);
    if (gen_rot) make_rotated(data, cfg.seed);
    if (gen_k) kfold_split(data, *gen_k, derive_seed(cfg.seed, {0x4b46}));
    save_dataset(data, gen_out);
    std::cout << (fs::path(gen_out) / "manifest.json").string() << " (" << data.manifest.records.size()
              << " volumes)\n";
    return 0;
  }

  if (*split) {
    Dataset data;
    data.manifest = read_manifest(split_manifest);
    const std::uint64_t seed = derive_seed(g.seed.value_or(data.manifest.seed), {0x4b46});
    const std::size_t normals = data.select(SetKind::normal).size();
    if (split_k > normals) throw CLI::ValidationError("--k exceeds the number of normal instances");
    const std::string out = split_out.empty() ? split_manifest : split_out;
    echo("split", {{"global", global}, {"manifest", split_manifest}, {"k", split_k}, {"out", out}});
    kfold_split(data, split_k, seed);
    if (!split_out.empty()) {
      // Volume paths stay relative to the original manifest.
      const auto from = fs::absolute(split_manifest).parent_path(), to = fs::absolute(out).parent_path();
      if (from != to)
        for (auto& r : data.manifest.records) r.path = (fs::relative(from, to) / r.path).generic_string();
    }
    write_manifest(data.manifest, out);
    std::cout << out << " (" << split_k << " folds)\n";
    return 0;
  }

  if (*tr) {
    const auto mpath = manifest_path(tr_manifest, g);
    const auto data = load_dataset(mpath);
    const auto cfg = resolve_train(g, tr_net, tr_flags, mpath, data.manifest);
    if (tr_fold && *tr_fold >= data.manifest.folds())
      throw CLI::ValidationError("--fold " + std::to_string(*tr_fold) + " is not assigned in the manifest");
    const fs::path log_path = tr_log.empty() ? fs::path(tr_out + ".log.json") : fs::path(tr_log);
    echo("train", {{"global", global},
                   {"train", cfg.to_json()},
                   {"fold", tr_fold ? json(*tr_fold) : json(nullptr)},
                   {"out", tr_out},
                   {"log", log_path.string()}});
    ensure_parent(tr_out);
    ensure_parent(log_path);
    if (cfg.precision == Precision::f32)
      train_and_save<float>(cfg, data, tr_fold, tr_out, log_path);
    else
      train_and_save<double>(cfg, data, tr_fold, tr_out, log_path);
    std::cout << tr_out << "\n";
    return 0;
  }

  if (*cv) {
    const auto mpath = manifest_path(cv_manifest, g);
    const auto data = load_dataset(mpath);
    auto cfg = resolve_train(g, cv_net, cv_flags, mpath, data.manifest);
    if (!cv_sets.empty()) {
      cfg.test_sets.clear();
      for (const auto& s : cv_sets) cfg.test_sets.push_back(parse_set_kind(s));
    }
    if (data.manifest.folds() == 0) throw FormatError(mpath + ": no fold assignment (run split first)");
    const std::string name = cv_name.empty() ? (cfg.network.variant == Variant::z3
                                                    ? std::string("z3")
                                                    : to_string(cfg.network.variant) + "/" + to_string(cfg.network.group))
                                             : cv_name;
    echo("cv", {{"global", global}, {"train", cfg.to_json()}, {"name", name}, {"out", cv_out},
                {"audit_trials", cv_audit_trials}});
    auto result = run_cv(cfg, data, [](const std::string& line) { std::cout << line << std::endl; });
    if (cv_audit_trials > 0) {
      const auto report = audit_spec(cfg.network, cfg.precision, cfg.seed, cv_audit_trials, data.manifest.dim);
      result.audit[to_string(cfg.network.variant)] = report.max_logit_deviation;
    }
    export_results({{name, result}}, cv_out);
    std::cout << accuracy_csv({{name, result}});
    return 0;
  }

  if (*ev) {
    const auto header = read_checkpoint_header(ev_ckpt);
    if (g.precision && parse_precision(*g.precision) != header.precision)
      throw FormatError(ev_ckpt + ": checkpoint precision is " + to_string(header.precision));
    const auto data = load_dataset(ev_manifest);
    const auto set = parse_set_kind(ev_set);
    echo("eval", {{"global", global},
                  {"checkpoint", ev_ckpt},
                  {"spec", header.spec.to_json()},
                  {"manifest", ev_manifest},
                  {"set", ev_set},
                  {"fold", ev_fold ? json(*ev_fold) : json(nullptr)}});
    const auto r = header.precision == Precision::f32
                       ? eval_checkpoint<float>(ev_ckpt, data, set, ev_fold, ev_batch)
                       : eval_checkpoint<double>(ev_ckpt, data, set, ev_fold, ev_batch);
    const json out{{"set", ev_set},
                   {"fold", ev_fold ? json(*ev_fold) : json(nullptr)},
                   {"accuracy", r.accuracy},
                   {"confusion", r.confusion}};
    if (!ev_out.empty()) {
      ensure_parent(ev_out);
      write_text(ev_out, r.to_json().dump(2) + "\n");
    }
    std::cout << out.dump() << "\n";
    return 0;
  }

  if (*au) {
    AuditReport report;
    const std::uint64_t seed = g.seed.value_or(0);
    if (!au_ckpt.empty()) {
      const auto header = read_checkpoint_header(au_ckpt);
      echo("audit", {{"global", global}, {"checkpoint", au_ckpt}, {"spec", header.spec.to_json()},
                     {"trials", au_trials}, {"dim", au_dim}});
      report = header.precision == Precision::f32 ? audit_checkpoint<float>(au_ckpt, au_trials, au_dim, seed)
                                                  : audit_checkpoint<double>(au_ckpt, au_trials, au_dim, seed);
    } else {
      const auto base = config_json(g);
      const auto spec = au_net.resolve(base.value("network", base), std::nullopt);
      const auto p = g.precision ? parse_precision(*g.precision) : Precision::f32;
      echo("audit", {{"global", global}, {"spec", spec.to_json()}, {"precision", to_string(p)},
                     {"trials", au_trials}, {"dim", au_dim}});
      report = audit_spec(spec, p, seed, au_trials, au_dim);
    }
    if (!au_out.empty()) {
      ensure_parent(au_out);
      write_text(au_out, report.to_json().dump(2) + "\n");
    }
    std::cout << "max logit deviation " << report.max_logit_deviation << "\n"
              << "mean logit deviation " << report.mean_logit_deviation << "\n"
              << "max feature deviation " << report.max_feature_deviation << "\n";
    if (au_tol && !(report.max_logit_deviation <= *au_tol)) {
      std::cerr << "error: max logit deviation exceeds " << *au_tol << "\n";
      return 3;
    }
    return 0;
  }

  if (*cp) {
    const auto base = config_json(g);
    const auto spec = cp_net.resolve(base.value("network", base), std::nullopt);
    echo("count-params", {{"global", global}, {"spec", spec.to_json()}});
    std::cout << count_parameters(spec) << "\n";
    return 0;
  }

  if (*ex) {
    std::vector<NamedResult> results;
    for (const auto& item : ex_results) {
      const auto eq = item.find('=');
      const std::string path = eq == std::string::npos ? item : item.substr(eq + 1);
      std::string name = eq == std::string::npos ? fs::path(path).parent_path().filename().string() : item.substr(0, eq);
      if (name.empty()) name = fs::path(path).stem().string();
      results.push_back({name, CVResult::from_json(load_json(path))});
    }
    echo("export", {{"global", global}, {"results", ex_results}, {"out", ex_out}});
    for (const auto& p : export_results(results, ex_out)) std::cout << p.string() << "\n";
    return 0;
  }

  if (*dg) {
    const SymmetryGroup group(parse_group_kind(dg_kind));
    echo("dump-group", {{"global", global}, {"kind", dg_kind}});
    auto j = group.to_json();
    j["order"] = group.size();
    std::cout << j.dump() << "\n";
    return 0;
  }
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const CLI::Error& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 1;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 3;
  } catch (const FormatError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const ShapeError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
