// ccmd: data generation, training, distillation, evaluation and the scaling
// experiments from the command line. Every command accepts --config FILE (a
// JSON object); flags given on the command line override keys from the file.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "ccmd/attention_dump.hpp"
#include "ccmd/checkpoint.hpp"
#include "ccmd/dataset_io.hpp"
#include "ccmd/experiments.hpp"
#include "ccmd/gradscan.hpp"
#include "ccmd/trainer.hpp"
#include "json.hpp"

namespace {

using namespace ccmd;
using nlohmann::json;
namespace fs = std::filesystem;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

json read_config(const std::string& path) {
  if (path.empty()) return json::object();
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open config file " + path);
  json j;
  try {
    j = json::parse(is);
  } catch (const json::parse_error& e) {
    throw std::runtime_error("config file " + path + ": " + e.what());
  }
  if (!j.is_object()) throw std::runtime_error("config file " + path + " must hold a JSON object");
  return j;
}

void reject_unknown(const json& j, std::initializer_list<const char*> keys, const std::string& what) {
  std::set<std::string> known(keys.begin(), keys.end());
  for (const auto& [k, v] : j.items())
    if (!known.contains(k)) throw std::invalid_argument(what + ": unknown key '" + k + "'");
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream os(path);
  os << j.dump(2) << '\n';
  if (!os) throw std::runtime_error("cannot write " + path.string());
}

// Flag values that overwrite config keys only when given.
template <class T>
void put(json& j, const json::json_pointer& key, const std::optional<T>& v) {
  if (v) j[key] = *v;
}

struct TrainFlags {
  std::string config;
  std::optional<double> lr, clip_norm, weight;
  std::optional<int> epochs, batch_size, width, layers, heads, ffn;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> train, val, teacher, run_dir, arch, mode, scope, rule;

  void add(CLI::App* app, bool distill) {
    app->add_option("--config", config, "JSON config file");
    app->add_option("--train", train, "training set (JSONL)");
    app->add_option("--val", val, "validation set (JSONL)");
    app->add_option("--run-dir", run_dir, "output directory");
    app->add_option("--lr", lr, "Adam learning rate");
    app->add_option("--clip-norm", clip_norm, "global gradient-norm clip, 0 = off");
    app->add_option("--epochs", epochs);
    app->add_option("--batch-size", batch_size);
    app->add_option("--seed", seed);
    app->add_option("--arch", arch, "transformer or gin");
    app->add_option("--width", width);
    app->add_option("--layers", layers);
    app->add_option("--heads", heads);
    app->add_option("--ffn", ffn);
    if (distill) {
      app->add_option("--teacher", teacher, "teacher checkpoint");
      app->add_option("--mode", mode, "none, global, local, global+local or naive-all");
      app->add_option("--scope", scope, "last or all");
      app->add_option("--rule", rule, "manual or coordinating");
      app->add_option("--weight", weight, "manual weight on the local term");
    }
  }

  json merged(json j) const {
    using P = json::json_pointer;
    put(j, P("/lr"), lr);
    put(j, P("/clip_norm"), clip_norm);
    put(j, P("/epochs"), epochs);
    put(j, P("/batch_size"), batch_size);
    put(j, P("/seed"), seed);
    put(j, P("/train"), train);
    put(j, P("/val"), val);
    put(j, P("/teacher"), teacher);
    put(j, P("/run_dir"), run_dir);
    put(j, P("/model/arch"), arch);
    put(j, P("/model/width"), width);
    put(j, P("/model/layers"), layers);
    put(j, P("/model/heads"), heads);
    put(j, P("/model/ffn"), ffn);
    put(j, P("/distill/mode"), mode);
    put(j, P("/distill/scope"), scope);
    put(j, P("/distill/rule"), rule);
    put(j, P("/distill/manual_weight"), weight);
    return j;
  }
};

train::TrainConfig training_config(const TrainFlags& f, json file) {
  return train::train_config_from_json(f.merged(std::move(file)));
}

void print_epoch(const train::EpochRecord& e) {
  std::fprintf(stderr, "epoch %d  train_mae %.5f  val_mae %.5f  l_m %.5f  l_a %.5f  %.1fs\n", e.epoch,
               e.train_mae, e.val_mae, e.loss.l_m, e.loss.l_a_mean, e.seconds);
}

void print_result(const train::TrainResult& r, const fs::path& run_dir) {
  std::cout << json{{"best_val_mae", r.record.best_val_mae},
                    {"best_epoch", r.record.best_epoch},
                    {"run_dir", run_dir.string()}}
                   .dump()
            << '\n';
}

std::pair<mol::Dataset, mol::Dataset> load_split(const train::TrainConfig& c) {
  if (c.train_path.empty() || c.val_path.empty())
    throw UsageError("--train and --val are required (flags or config)");
  return {mol::load_jsonl(c.train_path), mol::load_jsonl(c.val_path)};
}

fs::path require_run_dir(const train::TrainConfig& c) {
  if (c.run_dir.empty()) throw UsageError("--run-dir is required (flag or config)");
  return c.run_dir;
}

// gen-data -----------------------------------------------------------------
struct GenFlags {
  std::string config;
  std::optional<int> count, n_lo, n_hi;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  bool no_coords = false;
};

void gen_data(const GenFlags& f) {
  json j = read_config(f.config);
  reject_unknown(j, {"count", "seed", "n_lo", "n_hi", "out", "coords"}, "gen-data config");
  using P = json::json_pointer;
  put(j, P("/count"), f.count);
  put(j, P("/seed"), f.seed);
  put(j, P("/n_lo"), f.n_lo);
  put(j, P("/n_hi"), f.n_hi);
  put(j, P("/out"), f.out);
  if (f.no_coords) j["coords"] = false;
  const std::string out = j.value("out", std::string("data.jsonl"));
  mol::Dataset ds = mol::gen_synthetic(j.value("count", 1000), j.value("n_lo", 4), j.value("n_hi", 24),
                                       j.value("seed", std::uint64_t{0}));
  if (!j.value("coords", true))
    for (auto& m : ds.molecules) m.coords.reset();
  if (fs::path(out).has_parent_path()) fs::create_directories(fs::path(out).parent_path());
  mol::save_jsonl(ds, out);
  std::cout << json{{"out", out}, {"count", ds.molecules.size()}, {"label_mean", ds.label_mean},
                    {"label_std", ds.label_std}}
                   .dump()
            << '\n';
}

// train-teacher / distill --------------------------------------------------
void train_teacher_cmd(const TrainFlags& f) {
  const auto c = training_config(f, read_config(f.config));
  const auto dir = require_run_dir(c);
  const auto [train, val] = load_split(c);
  print_result(train::train_teacher(c, train, val, print_epoch), dir);
}

void distill_cmd(const TrainFlags& f) {
  const auto c = training_config(f, read_config(f.config));
  if (c.teacher_path.empty()) throw UsageError("distill needs --teacher (flag or config)");
  const auto dir = require_run_dir(c);
  const auto [train, val] = load_split(c);
  const Checkpoint teacher = load_checkpoint(c.teacher_path);
  print_result(train::distill_student(c, teacher, train, val, print_epoch), dir);
}

// eval ---------------------------------------------------------------------
void eval_cmd(const std::string& ckpt_path, const std::string& data_path, int batch_size) {
  const Checkpoint ckpt = load_checkpoint(ckpt_path);
  const mol::Dataset ds = mol::load_jsonl(data_path);
  const double mae = train::evaluate(ckpt, ds.molecules, ckpt.model.view, batch_size);
  std::cout << json{{"mae", mae}, {"count", ds.molecules.size()}, {"view", enc::to_string(ckpt.model.view)}}.dump()
            << '\n';
}

// grad-scan ----------------------------------------------------------------
struct ScanFlags {
  std::string config;
  std::optional<std::vector<std::string>> archs;
  std::optional<std::vector<int>> sizes;
  std::optional<int> seeds, molecules, width, layers, heads, ffn;
  std::optional<double> noise;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out_dir;
  bool exclude_virtual = false;
};

void grad_scan_cmd(const ScanFlags& f) {
  json j = read_config(f.config);
  reject_unknown(j,
                 {"archs", "sizes", "seeds", "molecules_per_cell", "teacher_noise", "seed", "width", "layers",
                  "heads", "ffn", "include_virtual", "weighted", "out_dir"},
                 "grad-scan config");
  using P = json::json_pointer;
  put(j, P("/archs"), f.archs);
  put(j, P("/sizes"), f.sizes);
  put(j, P("/seeds"), f.seeds);
  put(j, P("/molecules_per_cell"), f.molecules);
  put(j, P("/teacher_noise"), f.noise);
  put(j, P("/seed"), f.seed);
  put(j, P("/width"), f.width);
  put(j, P("/layers"), f.layers);
  put(j, P("/heads"), f.heads);
  put(j, P("/ffn"), f.ffn);
  put(j, P("/out_dir"), f.out_dir);
  if (f.exclude_virtual) j["include_virtual"] = false;

  scan::ScanConfig c;
  if (j.contains("archs")) {
    c.archs.clear();
    for (const auto& a : j["archs"]) c.archs.push_back(arch_from_string(a.get<std::string>()));
  }
  c.sizes = j.value("sizes", c.sizes);
  c.seeds = j.value("seeds", c.seeds);
  c.molecules_per_cell = j.value("molecules_per_cell", c.molecules_per_cell);
  c.teacher_noise = j.value("teacher_noise", c.teacher_noise);
  c.seed = j.value("seed", c.seed);
  c.width = j.value("width", c.width);
  c.layers = j.value("layers", c.layers);
  c.heads = j.value("heads", c.heads);
  c.ffn = j.value("ffn", c.ffn);
  c.include_virtual = j.value("include_virtual", c.include_virtual);
  c.weighted = j.value("weighted", c.weighted);
  const fs::path dir = j.value("out_dir", std::string());
  if (dir.empty()) throw UsageError("--out-dir is required");
  c.validate();

  fs::create_directories(dir);
  const auto r = scan::scaling_scan(c);
  write_json(dir / "config.json", r.config);
  {
    std::ofstream os(dir / "scan.csv");
    scan::write_csv(r, os);
  }
  if (c.weighted) {
    std::ofstream os(dir / "scan_coordinated.csv");
    scan::write_csv(r, os, true);
  }
  const json summary = scan::summary_json(r);
  write_json(dir / "summary.json", summary);
  for (const auto& d : r.dropped) std::cerr << "dropped: " << d << '\n';
  std::cout << summary["fits"].dump(2) << '\n';
}

// weight-sweep -------------------------------------------------------------
struct SweepFlags {
  TrainFlags train;
  std::optional<std::vector<double>> weights;
  std::optional<std::vector<std::uint64_t>> seeds;
  std::optional<int> train_count, val_count, n_lo, n_hi, teacher_epochs;
  std::optional<std::uint64_t> data_seed;
};

void weight_sweep_cmd(const SweepFlags& f) {
  json file = read_config(f.train.config);
  json sweep = file.contains("sweep") ? file["sweep"] : json::object();
  file.erase("sweep");
  reject_unknown(sweep, {"weights", "seeds", "train_count", "val_count", "n_lo", "n_hi", "data_seed", "teacher_epochs"},
                 "weight-sweep config");
  using P = json::json_pointer;
  put(sweep, P("/weights"), f.weights);
  put(sweep, P("/seeds"), f.seeds);
  put(sweep, P("/train_count"), f.train_count);
  put(sweep, P("/val_count"), f.val_count);
  put(sweep, P("/n_lo"), f.n_lo);
  put(sweep, P("/n_hi"), f.n_hi);
  put(sweep, P("/data_seed"), f.data_seed);
  put(sweep, P("/teacher_epochs"), f.teacher_epochs);

  train::TrainConfig c = training_config(f.train, file);
  const fs::path dir = require_run_dir(c);
  const auto weights = sweep.value("weights", std::vector<double>{1e-3, 1e-2, 1e-1, 1.0});
  const auto seeds = sweep.value("seeds", std::vector<std::uint64_t>{0, 1, 2, 3, 4});

  mol::Dataset train, val;
  if (!c.train_path.empty() || !c.val_path.empty()) {
    std::tie(train, val) = load_split(c);
  } else {
    std::tie(train, val) = exp::make_split(sweep.value("train_count", 5000), sweep.value("val_count", 1000),
                                           sweep.value("n_lo", 4), sweep.value("n_hi", 24),
                                           sweep.value("data_seed", std::uint64_t{2024}));
  }

  fs::create_directories(dir);
  json snapshot = train::to_json(c);
  snapshot["sweep"] = sweep;
  write_json(dir / "config.json", snapshot);

  Checkpoint teacher;
  if (!c.teacher_path.empty()) {
    teacher = load_checkpoint(c.teacher_path);
  } else {
    train::TrainConfig tc = c;
    tc.epochs = sweep.value("teacher_epochs", c.epochs);
    tc.run_dir = dir / "teacher";
    std::cerr << "training teacher in " << tc.run_dir << '\n';
    teacher = train::train_teacher(tc, train, val, print_epoch).best;
  }
  c.run_dir.clear();  // per-run directories would collide across the sweep
  const auto rows = exp::weight_sweep(c, teacher, train, val, weights, seeds, &std::cerr);
  std::ofstream os(dir / "sweep.csv");
  exp::write_sweep_csv(rows, os);
  if (!os) throw std::runtime_error("cannot write " + (dir / "sweep.csv").string());
  std::cout << (dir / "sweep.csv").string() << '\n';
}

// dump-attention -------------------------------------------------------------
void dump_attention_cmd(const std::string& ckpt_path, const std::string& data_path, std::size_t index,
                        const std::string& out_dir) {
  const Checkpoint ckpt = load_checkpoint(ckpt_path);
  const mol::Dataset ds = mol::load_jsonl(data_path);
  if (index >= ds.molecules.size())
    throw std::out_of_range("molecule index " + std::to_string(index) + " outside dataset of " +
                            std::to_string(ds.molecules.size()));
  mol::GraphBatch batch = mol::make_batch(std::span<const mol::Molecule>(&ds.molecules[index], 1));
  if (ckpt.model.view == enc::View::TwoD) batch = mol::strip_geometry(batch);
  ad::Tape tape;
  ParamBinding params(tape, ckpt.params, false);
  const auto out = model_forward(ckpt.model, params, batch);
  for (const auto& p : net::dump_attention(out.trace, out_dir, 0)) std::cout << p.string() << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cross-modal (3D -> 2D) distillation for molecular property prediction"};
  app.require_subcommand(1);

  GenFlags gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "generate a synthetic molecule dataset (JSONL)");
  gen_cmd->add_option("--config", gen.config, "JSON config file");
  gen_cmd->add_option("--count", gen.count, "number of molecules");
  gen_cmd->add_option("--seed", gen.seed);
  gen_cmd->add_option("--n-lo", gen.n_lo, "smallest atom count");
  gen_cmd->add_option("--n-hi", gen.n_hi, "largest atom count");
  gen_cmd->add_option("--out", gen.out, "output file (default data.jsonl)");
  gen_cmd->add_flag("--no-coords", gen.no_coords, "drop coordinates (2D-only data)");

  TrainFlags teacher;
  auto* teacher_cmd = app.add_subcommand("train-teacher", "train the 3D teacher");
  teacher.add(teacher_cmd, false);

  TrainFlags student;
  auto* distill = app.add_subcommand("distill", "train a 2D student from a frozen teacher");
  student.add(distill, true);

  std::string eval_ckpt, eval_data;
  int eval_batch = 64;
  auto* eval = app.add_subcommand("eval", "mean absolute error of a checkpoint on a dataset");
  eval->add_option("--checkpoint", eval_ckpt)->required();
  eval->add_option("--data", eval_data)->required();
  eval->add_option("--batch-size", eval_batch);

  ScanFlags scan_flags;
  auto* scan = app.add_subcommand("grad-scan", "virtual-token gradient norm vs molecule size");
  scan->add_option("--config", scan_flags.config, "JSON config file");
  scan->add_option("--archs", scan_flags.archs, "comma-separated: transformer,gin")->delimiter(',');
  scan->add_option("--sizes", scan_flags.sizes, "comma-separated atom counts")->delimiter(',');
  scan->add_option("--seeds", scan_flags.seeds, "number of seeds");
  scan->add_option("--molecules", scan_flags.molecules, "molecules per (size, seed) cell");
  scan->add_option("--noise", scan_flags.noise, "teacher perturbation sigma");
  scan->add_option("--seed", scan_flags.seed);
  scan->add_option("--width", scan_flags.width);
  scan->add_option("--layers", scan_flags.layers);
  scan->add_option("--heads", scan_flags.heads);
  scan->add_option("--ffn", scan_flags.ffn);
  scan->add_option("--out-dir", scan_flags.out_dir);
  scan->add_flag("--exclude-virtual", scan_flags.exclude_virtual, "leave the virtual slot out of the local loss");

  SweepFlags sweep;
  auto* sweep_cmd = app.add_subcommand("weight-sweep", "manual local-term weights vs the coordinating rule");
  sweep.train.add(sweep_cmd, false);
  sweep_cmd->add_option("--teacher", sweep.train.teacher, "teacher checkpoint (trained if omitted)");
  sweep_cmd->add_option("--weights", sweep.weights, "comma-separated manual weights")->delimiter(',');
  sweep_cmd->add_option("--seeds", sweep.seeds, "comma-separated seeds")->delimiter(',');
  sweep_cmd->add_option("--train-count", sweep.train_count, "generated training molecules when --train is absent");
  sweep_cmd->add_option("--val-count", sweep.val_count);
  sweep_cmd->add_option("--n-lo", sweep.n_lo);
  sweep_cmd->add_option("--n-hi", sweep.n_hi);
  sweep_cmd->add_option("--data-seed", sweep.data_seed);
  sweep_cmd->add_option("--teacher-epochs", sweep.teacher_epochs);

  std::string att_ckpt, att_data, att_out;
  std::size_t att_index = 0;
  auto* att = app.add_subcommand("dump-attention", "write per-layer, per-head attention maps as CSV");
  att->add_option("--checkpoint", att_ckpt)->required();
  att->add_option("--data", att_data)->required();
  att->add_option("--index", att_index, "molecule index in the dataset");
  att->add_option("--out-dir", att_out)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*gen_cmd) gen_data(gen);
    else if (*teacher_cmd) train_teacher_cmd(teacher);
    else if (*distill) distill_cmd(student);
    else if (*eval) eval_cmd(eval_ckpt, eval_data, eval_batch);
    else if (*scan) grad_scan_cmd(scan_flags);
    else if (*sweep_cmd) weight_sweep_cmd(sweep);
    else if (*att) dump_attention_cmd(att_ckpt, att_data, att_index, att_out);
  } catch (const UsageError& e) {
    std::cerr << "ccmd: " << e.what() << "\nRun with --help for usage.\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "ccmd: error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
