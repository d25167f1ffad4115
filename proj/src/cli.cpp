// SPDX-License-Identifier: Apache-2.0
// Copyright (C) 2026 mmfer contributors

#include "mmfer/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <functional>
#include <ostream>

#include "blas.hpp"
#include "mmfer/checkpoint.hpp"
#include "mmfer/error.hpp"
#include "mmfer/eval.hpp"
#include "mmfer/gradcheck.hpp"

namespace mmfer {

namespace fs = std::filesystem;

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= s.size()) {
    const auto comma = std::min(s.find(',', start), s.size());
    auto item = trim(std::string_view(s).substr(start, comma - start));
    if (!item.empty()) out.push_back(std::move(item));
    start = comma + 1;
  }
  return out;
}

std::string join(const std::vector<std::string>& items, std::string_view sep) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i) out += sep;
    out += items[i];
  }
  return out;
}

// Shortest %g form that reads back to the same double.
std::string fmt_double(double v) {
  char buf[64];
  for (int p = 1; p <= 17; ++p) {
    std::snprintf(buf, sizeof buf, "%.*g", p, v);
    if (std::strtod(buf, nullptr) == v) break;
  }
  return buf;
}

std::uint64_t to_u64(const std::string& s) {
  if (s.empty() || !std::all_of(s.begin(), s.end(), [](char c) { return c >= '0' && c <= '9'; })) {
    throw ConfigError("expected a non-negative integer, got '" + s + "'");
  }
  try {
    return std::stoull(s);
  } catch (const std::out_of_range&) {
    throw ConfigError("integer '" + s + "' is out of range");
  }
}

std::size_t to_size(const std::string& s) { return static_cast<std::size_t>(to_u64(s)); }

double to_double(const std::string& s) {
  char* end = nullptr;
  const double v = s.empty() ? 0.0 : std::strtod(s.c_str(), &end);
  if (s.empty() || end != s.c_str() + s.size() || !std::isfinite(v)) {
    throw ConfigError("expected a number, got '" + s + "'");
  }
  return v;
}

bool to_switch(const std::string& s) {
  if (s == "on" || s == "true" || s == "1") return true;
  if (s == "off" || s == "false" || s == "0") return false;
  throw ConfigError("expected on or off, got '" + s + "'");
}

SplitRatios to_split(const std::string& s) {
  const auto parts = split_list(s);
  if (parts.size() != 3) throw ConfigError("expected three comma-separated ratios train,val,test, got '" + s + "'");
  return {to_double(parts[0]), to_double(parts[1]), to_double(parts[2])};
}

struct KeySpec {
  std::string name;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

const std::vector<KeySpec>& schema() {
  static const std::vector<KeySpec> keys = {
      {"data", [](RunConfig& c, const std::string& v) { c.data = v; }, [](const RunConfig& c) { return c.data.string(); }},
      {"out", [](RunConfig& c, const std::string& v) { c.out = v; }, [](const RunConfig& c) { return c.out.string(); }},
      {"checkpoint", [](RunConfig& c, const std::string& v) { c.checkpoint = v; },
       [](const RunConfig& c) { return c.checkpoint.string(); }},
      {"resume", [](RunConfig& c, const std::string& v) { c.resume = v; },
       [](const RunConfig& c) { return c.resume.string(); }},
      {"fusion", [](RunConfig& c, const std::string& v) { c.model.fusion = parse_fusion(v); },
       [](const RunConfig& c) { return std::string(fusion_name(c.model.fusion)); }},
      {"d_model", [](RunConfig& c, const std::string& v) { c.model.d_model = to_size(v); },
       [](const RunConfig& c) { return std::to_string(c.model.d_model); }},
      {"n_layers", [](RunConfig& c, const std::string& v) { c.model.n_layers = to_size(v); },
       [](const RunConfig& c) { return std::to_string(c.model.n_layers); }},
      {"n_heads", [](RunConfig& c, const std::string& v) { c.model.n_heads = to_size(v); },
       [](const RunConfig& c) { return std::to_string(c.model.n_heads); }},
      {"d_ff", [](RunConfig& c, const std::string& v) { c.model.d_ff = to_size(v); },
       [](const RunConfig& c) { return std::to_string(c.model.d_ff); }},
      {"dropout", [](RunConfig& c, const std::string& v) { c.model.dropout = to_double(v); },
       [](const RunConfig& c) { return fmt_double(c.model.dropout); }},
      {"decision_hidden", [](RunConfig& c, const std::string& v) { c.model.decision_hidden = to_size(v); },
       [](const RunConfig& c) { return std::to_string(c.model.decision_hidden); }},
      {"loss", [](RunConfig& c, const std::string& v) { c.train.loss = parse_loss(v); },
       [](const RunConfig& c) { return std::string(loss_name(c.train.loss)); }},
      {"lr", [](RunConfig& c, const std::string& v) { c.train.lr = to_double(v); },
       [](const RunConfig& c) { return fmt_double(c.train.lr); }},
      {"weight_decay", [](RunConfig& c, const std::string& v) { c.train.weight_decay = to_double(v); },
       [](const RunConfig& c) { return fmt_double(c.train.weight_decay); }},
      {"batch_size", [](RunConfig& c, const std::string& v) { c.train.batch_size = to_size(v); },
       [](const RunConfig& c) { return std::to_string(c.train.batch_size); }},
      {"max_epochs", [](RunConfig& c, const std::string& v) { c.train.max_epochs = to_size(v); },
       [](const RunConfig& c) { return std::to_string(c.train.max_epochs); }},
      {"plateau_factor", [](RunConfig& c, const std::string& v) { c.train.plateau.factor = to_double(v); },
       [](const RunConfig& c) { return fmt_double(c.train.plateau.factor); }},
      {"plateau_patience", [](RunConfig& c, const std::string& v) { c.train.plateau.patience = to_size(v); },
       [](const RunConfig& c) { return std::to_string(c.train.plateau.patience); }},
      {"plateau_min_delta", [](RunConfig& c, const std::string& v) { c.train.plateau.min_delta = to_double(v); },
       [](const RunConfig& c) { return fmt_double(c.train.plateau.min_delta); }},
      {"seed", [](RunConfig& c, const std::string& v) { c.train.seed = to_u64(v); },
       [](const RunConfig& c) { return std::to_string(c.train.seed); }},
      {"determinism", [](RunConfig& c, const std::string& v) { c.train.determinism = to_switch(v); },
       [](const RunConfig& c) { return std::string(c.train.determinism ? "on" : "off"); }},
      {"freeze", [](RunConfig& c, const std::string& v) { c.train.freeze = split_list(v); },
       [](const RunConfig& c) { return join(c.train.freeze, ","); }},
      {"split", [](RunConfig& c, const std::string& v) { c.split = to_split(v); },
       [](const RunConfig& c) {
         return fmt_double(c.split.train) + "," + fmt_double(c.split.val) + "," + fmt_double(c.split.test);
       }},
      {"threshold", [](RunConfig& c, const std::string& v) { c.threshold = to_double(v); },
       [](const RunConfig& c) { return fmt_double(c.threshold); }},
  };
  return keys;
}

const KeySpec* find_key(const std::string& name) {
  for (const auto& k : schema()) {
    if (k.name == name) return &k;
  }
  return nullptr;
}

ConfigSource parse_assignment(const std::string& origin, const std::string& text) {
  const auto eq = text.find('=');
  if (eq == std::string::npos) return {origin, trim(text), "", true};
  return {origin, trim(std::string_view(text).substr(0, eq)), trim(std::string_view(text).substr(eq + 1)), false};
}

fs::path default_run_dir(std::uint64_t seed) {
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  localtime_r(&now, &tm);
  char stamp[32];
  std::strftime(stamp, sizeof stamp, "%Y%m%d-%H%M%S", &tm);
  return fs::path("runs") / (std::string(stamp) + "-seed" + std::to_string(seed));
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError("cannot write '" + path.string() + "'");
  out << text;
}

fs::path prepare_out_dir(RunConfig& cfg, const fs::path& fallback = {}) {
  if (cfg.out.empty()) cfg.out = fallback.empty() ? default_run_dir(cfg.train.seed) : fallback;
  fs::create_directories(cfg.out);
  write_text(cfg.out / "config.txt", render_config(cfg));
  return cfg.out;
}

void require(const fs::path& value, const char* key) {
  if (value.empty()) throw ConfigError(std::string(key) + " is required (--" + key + " or --set " + key + "=...)");
}

// Explicitly configured model keys that disagree with a checkpoint.
void check_against_checkpoint(const RunConfig& cfg, const ModelConfig& stored, const fs::path& path) {
  RunConfig ck = cfg;
  ck.model = stored;
  std::vector<std::string> diffs;
  for (const char* key : {"fusion", "d_model", "n_layers", "n_heads", "d_ff", "dropout", "decision_hidden"}) {
    if (!cfg.explicit_keys.count(key)) continue;
    const auto* spec = find_key(key);
    const auto want = spec->get(cfg), have = spec->get(ck);
    if (want != have) diffs.push_back(std::string(key) + ": configured " + want + ", checkpoint has " + have);
  }
  if (!diffs.empty()) {
    throw ConfigError("checkpoint '" + path.string() + "' does not match the configuration:\n  " + join(diffs, "\n  "));
  }
}

void apply_determinism(const RunConfig& cfg) {
  if (cfg.train.determinism) blas::set_threads(1);
}

DatasetSplit load_split(const RunConfig& cfg, std::ostream& err) {
  require(cfg.data, "data");
  const auto clips = load_dataset(cfg.data);
  auto split = stratified_split(clips, cfg.split, cfg.train.seed);
  for (const auto& w : split.warnings) err << "warning: " << w << '\n';
  return split;
}

std::string split_line(std::string_view tag, const DatasetSplit& s) {
  return std::string(tag) + " train=" + clip_id_hash(s.train) + " val=" + clip_id_hash(s.val) +
         " test=" + clip_id_hash(s.test) + " sizes=" + std::to_string(s.train.size()) + "/" +
         std::to_string(s.val.size()) + "/" + std::to_string(s.test.size());
}

std::function<bool(const EpochLog&, Model<float>&)> epoch_printer(std::ostream& out, std::string prefix) {
  return [&out, prefix](const EpochLog& l, Model<float>&) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%sepoch %zu  train_loss %.5f  train_war %.4f  val_loss %.5f  val_war %.4f  lr %.3g\n",
                  prefix.c_str(), l.epoch, l.train_loss, l.train_war, l.val_loss, l.val_war, l.lr);
    out << buf << std::flush;
    return true;
  };
}

std::string metrics_line(const EvalReport& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "war %.6f  uar_eq1 %.6f  uar_mean_recall %.6f  n_total %zu  n_filtered %zu", r.war,
                r.uar_eq1, r.uar_mean_recall, r.n_total, r.n_filtered);
  return buf;
}

// ---- subcommands -------------------------------------------------------------

struct SynthArgs {
  std::size_t n = 0;
  std::string mix = "uniform";
  double misalignment = 0.0;
  double noise = 0.1;
  std::uint64_t seed = 0;
  std::string out;
};

int cmd_synth(const SynthArgs& a, std::ostream& out) {
  SynthSpec spec;
  spec.n_clips = a.n;
  spec.misalignment = a.misalignment;
  spec.noise_sigma = a.noise;
  spec.seed = a.seed;
  if (a.mix != "uniform") {
    const auto parts = split_list(a.mix);
    if (parts.size() != kNumClasses) {
      throw ConfigError("--mix needs " + std::to_string(kNumClasses) + " comma-separated proportions, got " +
                        std::to_string(parts.size()));
    }
    for (std::size_t k = 0; k < kNumClasses; ++k) spec.mix[k] = to_double(parts[k]);
  }
  const auto clips = synthesize_dataset(spec);
  const fs::path dir = a.out.empty() ? default_run_dir(a.seed) : fs::path(a.out);
  const auto manifest = write_dataset(dir, clips);
  std::vector<std::string> mix;
  for (double m : spec.mix) mix.push_back(fmt_double(m));
  out << "n=" << a.n << " mix=" << join(mix, ",") << " misalignment=" << fmt_double(a.misalignment)
      << " noise=" << fmt_double(a.noise) << " seed=" << a.seed << '\n'
      << "wrote " << clips.size() << " clips, manifest " << manifest.string() << '\n';
  return 0;
}

int cmd_train(RunConfig cfg, std::ostream& out, std::ostream& err) {
  apply_determinism(cfg);
  std::optional<Model<float>> model;
  FitOptions<float> fo;
  if (!cfg.resume.empty()) {
    const auto ck = cfg.resume / "last.mmck";
    const auto stored = read_checkpoint_config(ck);
    check_against_checkpoint(cfg, stored, ck);
    cfg.model = stored;
    model.emplace(load_checkpoint<float>(ck));
    fo.resume = read_resume_state(cfg.resume / "train_state.txt");
    fo.reset_lr = cfg.explicit_keys.count("lr") > 0;
  }
  const auto dir = prepare_out_dir(cfg, cfg.resume);
  const auto split = load_split(cfg, err);
  const auto line = split_line("split", split);
  out << line << '\n';
  write_text(dir / "split.txt", line + '\n');
  if (!model) model.emplace(cfg.model, cfg.train.seed);

  fo.out_dir = dir;
  fo.on_epoch = epoch_printer(out, "");
  const auto result = fit(*model, cfg.train, split.train, split.val, fo);
  out << "epochs run " << result.log.size() << ", next epoch " << result.state.next_epoch << ", best val_loss "
      << fmt_double(result.state.best_val_loss) << '\n'
      << "outputs in " << dir.string() << '\n';
  return 0;
}

int cmd_eval(RunConfig cfg, std::ostream& out) {
  apply_determinism(cfg);
  require(cfg.checkpoint, "checkpoint");
  require(cfg.data, "data");
  const auto stored = read_checkpoint_config(cfg.checkpoint);
  check_against_checkpoint(cfg, stored, cfg.checkpoint);
  cfg.model = stored;
  auto model = load_checkpoint<float>(cfg.checkpoint);
  const auto clips = load_dataset(cfg.data);
  const auto dir = prepare_out_dir(cfg);
  const auto report = evaluate(model, clips, cfg.threshold);
  write_report(report, dir);
  out << metrics_line(report) << '\n' << "outputs in " << dir.string() << '\n';
  return 0;
}

int cmd_compare_fusion(RunConfig cfg, std::ostream& out, std::ostream& err) {
  if (!cfg.resume.empty()) throw ConfigError("resume is not supported by compare-fusion");
  apply_determinism(cfg);
  const auto dir = prepare_out_dir(cfg);
  const auto split = load_split(cfg, err);

  std::string table = "model,war,uar_eq1,uar_mean_recall\n";
  std::string hashes;
  for (FusionMode mode : kFusionModes) {
    const std::string name(fusion_name(mode)), label(fusion_label(mode));
    // Every variant is handed the same split object; the hash shows it.
    const auto line = split_line(label, split);
    out << line << '\n';
    hashes += line + '\n';

    ModelConfig mc = cfg.model;
    mc.fusion = mode;
    Model<float> model(mc, cfg.train.seed);
    FitOptions<float> fo;
    fo.out_dir = dir / name;
    fo.on_epoch = epoch_printer(out, label + " ");
    auto result = fit(model, cfg.train, split.train, split.val, fo);
    const auto report = evaluate(result.best, split.test, cfg.threshold);
    write_report(report, dir / name / "test");
    out << label << " test " << metrics_line(report) << '\n';

    char row[160];
    std::snprintf(row, sizeof row, "%s,%.6f,%.6f,%.6f\n", label.c_str(), report.war, report.uar_eq1,
                  report.uar_mean_recall);
    table += row;
  }
  write_text(dir / "split_hashes.txt", hashes);
  write_text(dir / "fusion.csv", table);
  out << table << "outputs in " << dir.string() << '\n';
  return 0;
}

void print_gradcheck(std::ostream& out, const std::string& tag, const GradcheckResult& r) {
  char buf[512];
  std::snprintf(buf, sizeof buf, "%-30s checked %4zu  worst %.3e at %s[%zu]  %s", tag.c_str(), r.checked,
                r.worst.rel_error, r.worst.where.c_str(), r.worst.index, r.passed() ? "ok" : "FAIL");
  out << buf;
  if (r.narrowed || r.redrawn) out << "  (relu kinks: " << r.narrowed << " narrowed, " << r.redrawn << " redrawn)";
  out << '\n';
  const std::size_t shown = std::min<std::size_t>(r.failures.size(), 10);
  for (std::size_t i = 0; i < shown; ++i) {
    const auto& f = r.failures[i];
    std::snprintf(buf, sizeof buf, "  FAIL op=%s %s index=%zu analytic=%.10g numeric=%.10g rel=%.3e\n", r.name.c_str(),
                  f.where.c_str(), f.index, f.analytic, f.numeric, f.rel_error);
    out << buf;
  }
  if (r.failures.size() > shown) out << "  ... " << r.failures.size() - shown << " more\n";
}

int cmd_gradcheck(const RunConfig& cfg, std::size_t samples, const std::string& fault, std::ostream& out) {
  struct FaultGuard {
    explicit FaultGuard(const std::string& op) {
      if (!op.empty()) debug::set_backward_fault(op, 1.5);
    }
    ~FaultGuard() { debug::clear_backward_fault(); }
  } guard(fault);

  bool ok = true;
  for (const auto& r : gradcheck_ops(cfg.train.seed)) {
    print_gradcheck(out, "op " + r.name, r);
    ok = ok && r.passed();
  }
  for (FusionMode mode : kFusionModes) {
    ModelConfig mc = cfg.model;
    mc.fusion = mode;
    const auto r = gradcheck_model(mc, cfg.train.seed, samples);
    print_gradcheck(out, "model " + std::string(fusion_name(mode)), r);
    ok = ok && r.passed();
  }
  out << "gradcheck " << (ok ? "passed" : "FAILED") << " (tolerance " << fmt_double(kGradcheckTolerance) << ")\n";
  return ok ? 0 : 2;
}

}  // namespace

// ---- configuration -----------------------------------------------------------

const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> v;
    for (const auto& k : schema()) v.push_back(k.name);
    return v;
  }();
  return names;
}

std::vector<ConfigSource> read_config_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("config file '" + path.string() + "' cannot be read");
  std::vector<ConfigSource> out;
  std::string line;
  for (std::size_t n = 1; std::getline(in, line); ++n) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    if (trim(line).empty()) continue;
    out.push_back(parse_assignment(path.filename().string() + ":" + std::to_string(n), line));
  }
  return out;
}

RunConfig resolve_config(const std::vector<ConfigSource>& entries) {
  RunConfig cfg;
  std::vector<std::string> errors;
  for (const auto& e : entries) {
    if (e.malformed) {
      errors.push_back(e.origin + ": expected key=value, got '" + e.key + "'");
      continue;
    }
    const auto* spec = find_key(e.key);
    if (!spec) {
      errors.push_back(e.origin + ": unknown key '" + e.key + "' (valid keys: " + join(config_keys(), ", ") + ")");
      continue;
    }
    try {
      spec->set(cfg, e.value);
      cfg.explicit_keys.insert(e.key);
    } catch (const Error& ex) {
      errors.push_back(e.origin + ": " + e.key + ": " + ex.what());
    }
  }
  auto check = [&](const std::function<void()>& fn) {
    try {
      fn();
    } catch (const Error& ex) {
      errors.push_back(ex.what());
    }
  };
  check([&] { cfg.model.validate(); });
  check([&] { cfg.train.validate(); });
  check([&] {
    const auto& s = cfg.split;
    if (!(s.train > 0 && s.val >= 0 && s.test >= 0) || std::abs(s.train + s.val + s.test - 1.0) > 1e-9) {
      throw ConfigError("split: ratios must be non-negative, train positive, and sum to 1");
    }
  });
  check([&] {
    if (!(cfg.threshold >= 0)) throw ConfigError("threshold must be >= 0");
  });
  if (!errors.empty()) throw ConfigError(join(errors, "\n"));
  return cfg;
}

std::string render_config(const RunConfig& cfg) {
  std::string out;
  for (const auto& k : schema()) out += k.name + "=" + k.get(cfg) + "\n";
  return out;
}

std::string clip_id_hash(std::span<const ClipFeatures> clips) {
  std::vector<std::string_view> ids;
  for (const auto& c : clips) ids.push_back(c.clip_id);
  std::sort(ids.begin(), ids.end());
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (auto id : ids) {
    for (unsigned char ch : id) h = (h ^ ch) * 0x100000001b3ULL;
    h = (h ^ '\n') * 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// ---- entry point ---------------------------------------------------------------

int run_cli(std::vector<std::string> args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Multimodal dynamic facial expression recognition: synthesis, training, evaluation", "mmfer"};
  app.require_subcommand(1);

  struct Common {
    std::string config, out, seed, threshold, determinism, data, checkpoint;
    std::vector<std::string> sets;
    std::vector<std::pair<std::string, CLI::Option*>> flags;
  };
  auto add_common = [](CLI::App* sub, Common& c, bool with_checkpoint) {
    sub->add_option("--config", c.config, "key=value configuration file");
    sub->add_option("--set", c.sets, "override one key (repeatable)")->type_name("KEY=VALUE");
    c.flags = {
        {"out", sub->add_option("--out", c.out, "output directory")},
        {"seed", sub->add_option("--seed", c.seed, "seed")},
        {"threshold", sub->add_option("--threshold", c.threshold, "ambiguity threshold for metrics")},
        {"determinism", sub->add_option("--determinism", c.determinism, "single-threaded BLAS")
                            ->check(CLI::IsMember({"on", "off"}))},
        {"data", sub->add_option("--data", c.data, "dataset manifest")},
    };
    if (with_checkpoint) c.flags.emplace_back("checkpoint", sub->add_option("--checkpoint", c.checkpoint, "checkpoint"));
  };
  auto resolve = [](const Common& c) {
    std::vector<ConfigSource> entries;
    if (!c.config.empty()) entries = read_config_file(c.config);
    for (const auto& s : c.sets) entries.push_back(parse_assignment("--set", s));
    for (const auto& [key, opt] : c.flags) {
      if (opt->count()) entries.push_back({"--" + key, key, opt->as<std::string>(), false});
    }
    return resolve_config(entries);
  };

  SynthArgs synth;
  auto* synth_cmd = app.add_subcommand("synth", "write a synthetic dataset");
  synth_cmd->add_option("--n", synth.n, "number of clips")->required();
  synth_cmd->add_option("--mix", synth.mix, "7 class proportions, comma-separated, or 'uniform'");
  synth_cmd->add_option("--misalignment", synth.misalignment, "pose/audio class-anchor mismatch in [0, 1]");
  synth_cmd->add_option("--noise", synth.noise, "feature noise sigma");
  synth_cmd->add_option("--seed", synth.seed, "seed");
  synth_cmd->add_option("--out", synth.out, "output directory");

  Common train_c, eval_c, compare_c, grad_c;
  auto* train_cmd = app.add_subcommand("train", "train one model");
  add_common(train_cmd, train_c, false);
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
  add_common(eval_cmd, eval_c, true);
  auto* compare_cmd = app.add_subcommand("compare-fusion", "train and test the three fusion variants");
  add_common(compare_cmd, compare_c, false);
  auto* grad_cmd = app.add_subcommand("gradcheck", "finite-difference check of every op and the full model");
  add_common(grad_cmd, grad_c, false);
  std::size_t samples = 200;
  std::string fault;
  grad_cmd->add_option("--samples", samples, "parameters probed per fusion mode");
  grad_cmd->add_option("--inject-fault", fault)->group("");

  try {
    std::reverse(args.begin(), args.end());
    app.parse(args);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? 0 : 1;
  }

  try {
    if (*synth_cmd) return cmd_synth(synth, out);
    if (*train_cmd) return cmd_train(resolve(train_c), out, err);
    if (*eval_cmd) return cmd_eval(resolve(eval_c), out);
    if (*compare_cmd) return cmd_compare_fusion(resolve(compare_c), out, err);
    if (*grad_cmd) return cmd_gradcheck(resolve(grad_c), samples, fault, out);
  } catch (const NumericalError& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}

}  // namespace mmfer
