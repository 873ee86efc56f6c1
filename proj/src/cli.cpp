#include "downscale/cli.hpp"

#include <Eigen/Core>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <random>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "downscale/checkpoint.hpp"
#include "downscale/crc32.hpp"
#include "downscale/detail/binary_io.hpp"
#include "downscale/error.hpp"
#include "downscale/metrics.hpp"
#include "downscale/ops.hpp"
#include "downscale/tiles.hpp"

#ifndef DOWNSCALE_VERSION
#define DOWNSCALE_VERSION "dev"
#endif

namespace downscale {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

struct Globals {
  std::uint64_t seed = 0;
  bool seed_given = false;
  std::size_t threads = 1;
  bool verbose = false;
};

std::string hex32(std::uint32_t v) {
  char buf[9];
  std::snprintf(buf, sizeof(buf), "%08x", v);
  return buf;
}

std::string file_hash(const fs::path& p) { return hex32(crc32(std::span<const std::byte>(detail::read_file(p.string())))); }

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p);
  if (!out) throw IoError("cannot write " + p.string());
  out << text;
  if (!out) throw IoError("write failed for " + p.string());
}

std::string read_text(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw IoError("cannot open " + p.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void ensure_dir(const fs::path& p) {
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec) throw IoError("cannot create " + p.string() + ": " + ec.message());
}

void write_run_manifest(const fs::path& out_dir, const std::string& command, const std::vector<std::string>& args,
                        const std::string& config_text, const std::vector<fs::path>& inputs, std::uint64_t seed) {
  json j;
  j["command"] = command;
  j["args"] = args;
  j["seed"] = seed;
  j["code_version"] = DOWNSCALE_VERSION;
  j["config_hash"] = hex32(crc32(std::as_bytes(std::span(config_text.data(), config_text.size()))));
  json hashes = json::object();
  for (const auto& p : inputs) hashes[p.string()] = file_hash(p);
  j["input_hashes"] = hashes;
  write_text(out_dir / "run_manifest.json", j.dump(2) + "\n");
}

std::pair<std::size_t, std::size_t> parse_size(const std::string& text) {
  const auto x = text.find('x');
  try {
    if (x == std::string::npos) {
      const auto n = std::stoul(text);
      return {n, n};
    }
    return {std::stoul(text.substr(0, x)), std::stoul(text.substr(x + 1))};
  } catch (const std::exception&) {
    throw ConfigError("cannot parse size '" + text + "' (expected HxW)");
  }
}

struct PairData {
  Grid input;
  Grid target;
  fs::path input_path;
  fs::path target_path;
};

std::vector<PairData> load_pairs(const fs::path& data_dir, const PairManifest& manifest) {
  std::vector<PairData> out;
  for (const auto& [in, tg] : manifest.pairs) {
    PairData p;
    p.input_path = data_dir / in;
    p.target_path = data_dir / tg;
    p.input = read_grid(p.input_path.string());
    p.target = read_grid(p.target_path.string());
    if (p.target.height() != manifest.scale_factor * p.input.height() ||
        p.target.width() != manifest.scale_factor * p.input.width()) {
      throw ShapeError("pair " + in + " / " + tg + " violates the " + std::to_string(manifest.scale_factor) +
                       "x shape relation");
    }
    out.push_back(std::move(p));
  }
  if (out.empty()) throw ShapeError("manifest lists no pairs");
  return out;
}

void check_compatible(const RunConfig& cfg, const PairManifest& manifest, const std::vector<PairData>& pairs) {
  if (manifest.scale_factor != cfg.model.scale_factor) {
    throw ShapeError("data scale factor " + std::to_string(manifest.scale_factor) + " differs from model scale " +
                     std::to_string(cfg.model.scale_factor));
  }
  for (const auto& p : pairs) {
    if (p.input.channel_count() != cfg.model.in_channels || p.target.channel_count() != cfg.model.out_channels) {
      throw ShapeError("data has " + std::to_string(p.input.channel_count()) + "->" +
                       std::to_string(p.target.channel_count()) + " channels, model expects " +
                       std::to_string(cfg.model.in_channels) + "->" + std::to_string(cfg.model.out_channels));
    }
    if (p.input.height() != pairs[0].input.height() || p.input.width() != pairs[0].input.width()) {
      throw ShapeError("all inputs must share one grid size");
    }
  }
}

std::size_t train_count(const RunConfig& cfg, std::size_t pairs) {
  const auto n = static_cast<std::size_t>(std::floor(cfg.train_fraction * static_cast<double>(pairs)));
  return std::clamp<std::size_t>(n, 1, pairs);
}

// Held-out pairs; falls back to the training pairs when nothing is held out.
std::vector<std::size_t> test_indices(const RunConfig& cfg, std::size_t pairs) {
  const std::size_t n_train = train_count(cfg, pairs);
  std::vector<std::size_t> idx;
  for (std::size_t i = n_train; i < pairs; ++i) idx.push_back(i);
  if (idx.empty()) {
    for (std::size_t i = 0; i < pairs; ++i) idx.push_back(i);
  }
  return idx;
}

TileLayout layout_for(const RunConfig& cfg, std::size_t h, std::size_t w) {
  const bool tiled = cfg.tile_rows * cfg.tile_cols > 1;
  return plan_tiles(h, w, cfg.tile_rows, cfg.tile_cols, tiled ? cfg.halo : 0, cfg.model.patch_size,
                    cfg.model.scale_factor);
}

MetricsReport aggregate(const std::vector<MetricsReport>& rows) {
  MetricsReport a;
  if (rows.empty()) return a;
  a.transform = rows[0].transform;
  for (const auto& r : rows) {
    a.r2 += r.r2;
    a.rmse += r.rmse;
    a.rmse_q68 += r.rmse_q68;
    a.rmse_q95 += r.rmse_q95;
    a.rmse_q997 += r.rmse_q997;
    a.ssim += r.ssim;
    a.psnr += r.psnr;
    a.n_pixels += r.n_pixels;
  }
  const double n = static_cast<double>(rows.size());
  a.r2 /= n;
  a.rmse /= n;
  a.rmse_q68 /= n;
  a.rmse_q95 /= n;
  a.rmse_q997 /= n;
  a.ssim /= n;
  a.psnr /= n;
  return a;
}

std::vector<MetricsReport> evaluate_pairs(ReslimModel<float>* model, const RunConfig& cfg,
                                          const std::vector<PairData>& pairs, const std::vector<std::size_t>& idx,
                                          const fs::path* spectra_dir = nullptr) {
  std::vector<MetricsReport> rows;
  for (auto i : idx) {
    const Grid pred = model ? predict_grid(*model, cfg, pairs[i].input) : pairs[i].target;
    rows.push_back(evaluate(pred, pairs[i].target, cfg.transform));
    if (spectra_dir) {
      for (std::size_t c = 0; c < pred.channel_count(); ++c) {
        if (pred.height() < 16 || pred.width() < 16) continue;
        char name[64];
        std::snprintf(name, sizeof(name), "spectrum_pair%04zu_ch%zu.csv", i, c);
        write_text(*spectra_dir / name, spectrum_csv(radial_power_spectrum(pred.channels[c].cast<double>())));
      }
    }
  }
  return rows;
}

// ---------------------------------------------------------------- gen-data

struct GenArgs {
  std::string out;
  std::size_t pairs = 4;
  std::string size = "128x128";
  std::size_t scale = 4;
  std::size_t channels = 1;
  double slope = -3.0;
};

int cmd_gen_data(const GenArgs& a, const Globals& g, const std::vector<std::string>& args) {
  const auto [h, w] = parse_size(a.size);
  GeneratorSpec spec;
  spec.height = h;
  spec.width = w;
  spec.channels = a.channels;
  spec.spectral_slope = a.slope;
  spec.seed = g.seed;
  make_pairs(a.out, a.pairs, a.scale, spec);
  const fs::path manifest = fs::path(a.out) / "manifest.json";
  std::ostringstream cfg;
  cfg << "size=" << a.size << " pairs=" << a.pairs << " scale=" << a.scale << " channels=" << a.channels
      << " slope=" << a.slope;
  write_run_manifest(a.out, "gen-data", args, cfg.str(), {manifest}, g.seed);
  std::cout << manifest.string() << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------- train

struct TrainArgs {
  std::string config;
  std::string out;
  std::string data;
};

int cmd_train(const TrainArgs& a, const Globals& g, const std::vector<std::string>& args) {
  const std::string config_text = read_text(a.config);
  RunConfig cfg = parse_run_config(config_text);
  if (!a.out.empty()) cfg.out_dir = a.out;
  if (!a.data.empty()) cfg.data_dir = a.data;
  if (g.seed_given) cfg.seed = g.seed;
  const fs::path out_dir = cfg.out_dir, data_dir = cfg.data_dir;
  ensure_dir(out_dir);

  const PairManifest manifest = read_manifest((data_dir / "manifest.json").string());
  const auto pairs = load_pairs(data_dir, manifest);
  check_compatible(cfg, manifest, pairs);
  const std::size_t n_train = train_count(cfg, pairs.size());

  if (cfg.norm_from_data) {
    std::vector<Tensor<float>> inputs;
    for (std::size_t i = 0; i < n_train; ++i) inputs.push_back(to_tensor<float>(pairs[i].input));
    cfg.model.norm = channel_statistics(inputs);
    cfg.norm_from_data = false;
  }
  std::vector<Sample<float>> train;
  for (std::size_t i = 0; i < n_train; ++i) {
    train.push_back({normalize_input(to_tensor<float>(pairs[i].input), cfg.model),
                     normalize_target(to_tensor<float>(pairs[i].target), cfg.model), lat_weights(pairs[i].target)});
  }

  ReslimModel<float> model(cfg.model, cfg.seed);
  const bool tiled = cfg.tile_rows * cfg.tile_cols > 1 || cfg.workers > 1;
  const TileLayout layout = layout_for(cfg, pairs[0].input.height(), pairs[0].input.width());
  std::vector<ReslimModel<float>> replicas;
  std::vector<AdamState<float>> optimizers;
  AdamState<float> optimizer;
  optimizer.lr = cfg.lr;
  if (tiled) {
    for (std::size_t w = 0; w < cfg.workers; ++w) {
      replicas.push_back(model.clone());
      optimizers.push_back(optimizer);
    }
  }

  std::mt19937_64 rng(mix_seed(cfg.seed, 0x7261696e));
  std::uniform_int_distribution<std::size_t> pick(0, n_train - 1);
  std::ostringstream loss_csv;
  loss_csv.precision(10);
  loss_csv << "step,loss,attn_madds,total_madds,wall_ms\n";
  std::ostringstream history;
  history.precision(10);
  history << "step,r2,rmse,ssim\n";
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    std::vector<Sample<float>> batch;
    for (std::size_t b = 0; b < cfg.batch_size; ++b) batch.push_back(train[pick(rng)]);
    const auto start = std::chrono::steady_clock::now();
    double loss = 0;
    FlopLedger flops;
    if (tiled) {
      const TiledStep r = tiled_train_step(std::span<const Sample<float>>(batch), replicas, optimizers, layout);
      loss = r.loss;
      for (const auto& rep : r.reports) flops += rep.flops;
    } else {
      const StepResult r = train_step(std::span<const Sample<float>>(batch), model, optimizer);
      loss = r.loss;
      flops = r.flops;
    }
    const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    loss_csv << step << ',' << loss << ',' << flops.attention << ',' << flops.total() << ',' << ms << '\n';
    if (g.verbose && (step % 50 == 0 || step + 1 == cfg.steps)) {
      std::cerr << "step " << step << " loss " << loss << " (" << ms << " ms)\n";
    }
    if (cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0) {
      auto& current = tiled ? replicas[0] : model;
      const auto agg = aggregate(evaluate_pairs(&current, cfg, pairs, test_indices(cfg, pairs.size())));
      history << step + 1 << ',' << agg.r2 << ',' << agg.rmse << ',' << agg.ssim << '\n';
    }
  }
  if (tiled) model = replicas[0];

  const fs::path ckpt = out_dir / "model.ckpt";
  write_checkpoint(ckpt.string(), model.to_stored());
  write_text(out_dir / "model.ini", format_run_config(cfg));
  write_text(out_dir / "loss.csv", loss_csv.str());
  if (cfg.eval_every > 0) write_text(out_dir / "validation_history.csv", history.str());
  const auto agg = aggregate(evaluate_pairs(&model, cfg, pairs, test_indices(cfg, pairs.size())));
  write_text(out_dir / "validation.json", report_to_json(agg) + "\n");

  std::vector<fs::path> inputs = {a.config, data_dir / "manifest.json"};
  for (const auto& p : pairs) {
    inputs.push_back(p.input_path);
    inputs.push_back(p.target_path);
  }
  write_run_manifest(out_dir, "train", args, config_text, inputs, cfg.seed);
  std::cout << ckpt.string() << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------- eval

struct EvalArgs {
  std::string config;
  std::string checkpoint;
  std::string data;
  std::string out;
  std::string split = "test";
  bool identity = false;
  bool spectrum = false;
};

int cmd_eval(const EvalArgs& a, const Globals& g, const std::vector<std::string>& args) {
  RunConfig cfg;
  std::string config_text;
  if (!a.config.empty()) {
    config_text = read_text(a.config);
    cfg = parse_run_config(config_text);
  } else if (!a.identity) {
    throw ConfigError("eval: --config is required unless --identity is given");
  }
  const fs::path data_dir = a.data.empty() ? fs::path(cfg.data_dir) : fs::path(a.data);
  const fs::path out_dir = a.out;
  ensure_dir(out_dir);
  const PairManifest manifest = read_manifest((data_dir / "manifest.json").string());
  const auto pairs = load_pairs(data_dir, manifest);

  std::optional<ReslimModel<float>> model;
  if (!a.identity) {
    if (a.checkpoint.empty()) throw ConfigError("eval: --checkpoint is required unless --identity is given");
    check_compatible(cfg, manifest, pairs);
    model.emplace(cfg.model, cfg.seed);
    model->load_stored(read_checkpoint(a.checkpoint));
  }
  std::vector<std::size_t> idx;
  if (a.split == "all") {
    for (std::size_t i = 0; i < pairs.size(); ++i) idx.push_back(i);
  } else if (a.split == "test") {
    idx = test_indices(cfg, pairs.size());
  } else {
    throw ConfigError("eval: --split must be test or all");
  }
  const auto rows = evaluate_pairs(model ? &*model : nullptr, cfg, pairs, idx, a.spectrum ? &out_dir : nullptr);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    char name[48];
    std::snprintf(name, sizeof(name), "pair_%04zu.json", idx[r]);
    write_text(out_dir / name, report_to_json(rows[r]) + "\n");
  }
  const fs::path report = out_dir / "aggregate.json";
  write_text(report, report_to_json(aggregate(rows)) + "\n");

  std::vector<fs::path> inputs = {data_dir / "manifest.json"};
  if (!a.config.empty()) inputs.emplace_back(a.config);
  if (!a.checkpoint.empty()) inputs.emplace_back(a.checkpoint);
  write_run_manifest(out_dir, "eval", args, config_text, inputs, g.seed);
  std::cout << report.string() << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------- bench

struct BenchArgs {
  std::string out;
  std::string sizes = "64";
  std::string tiles = "1,4,16";
  std::string compression = "off";
  std::size_t halo = 2;
  std::size_t steps = 2;
  std::size_t dim = 16;
  std::size_t layers = 1;
  std::size_t heads = 1;
  std::size_t scale = 4;
  double threshold = 0.05;
};

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  if (out.empty()) throw ConfigError("empty list '" + text + "'");
  return out;
}

std::size_t to_count(const std::string& s) {
  try {
    std::size_t pos = 0;
    const auto v = std::stoul(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("expected a non-negative integer, got '" + s + "'");
  }
}

// Gives the zero-initialized output layers small random values so tiled and
// untiled outputs can actually differ.
void perturb_zero_layers(ReslimModel<float>& model, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 0.02);
  for (Tensor<float>* t : {&model.heads[scale_slot(model.config().scale_factor)].weight, &model.res_conv2}) {
    for (auto& v : t->mutable_values()) v = static_cast<float>(normal(rng));
  }
}

int cmd_bench(const BenchArgs& a, const Globals& g, const std::vector<std::string>& args) {
  const fs::path out_dir = a.out;
  ensure_dir(out_dir);
  std::ostringstream csv;
  csv.precision(10);
  csv << "step,T,halo,tokens_per_tile,attn_madds,wall_ms,seam_rmse,size,compression,tokens,time_per_sample_ms,speedup\n";
  double first_time = 0;
  for (const auto& size_text : split_list(a.sizes)) {
    const std::size_t size = to_count(size_text);
    const Grid field = synth_grf(size, size, 1, -3.0, g.seed);
    const Tensor<float> x = to_tensor<float>(field);
    for (const auto& comp : split_list(a.compression)) {
      ReslimConfig mc;
      mc.embed_dim = a.dim;
      mc.num_layers = a.layers;
      mc.num_heads = a.heads;
      mc.scale_factor = a.scale;
      if (comp != "off" && comp != "1") {
        mc.compression = true;
        mc.compression_settings = {1, to_count(comp), a.threshold};
      }
      ReslimModel<float> model(mc, g.seed);
      perturb_zero_layers(model, mix_seed(g.seed, 1));
      Tensor<float> reference;
      std::size_t reference_tokens = 0;
      for (const auto& t_text : split_list(a.tiles)) {
        const std::size_t T = to_count(t_text);
        const auto side = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(T))));
        if (side * side != T) throw ConfigError("bench: tile counts must be perfect squares, got " + t_text);
        try {
          const TileLayout layout = plan_tiles(size, size, side, side, T > 1 ? a.halo : 0, mc.patch_size, mc.scale_factor);
          double total_ms = 0;
          std::vector<std::string> rows;
          for (std::size_t step = 0; step < a.steps; ++step) {
            for (auto* p : model.trainable()) p->zero_grad();
            const auto start = std::chrono::steady_clock::now();
            FlopScope scope;
            TiledOutput<float> out = tiled_forward(x, model, layout, g.threads);
            const FlopLedger fwd = scope.ledger();
            backward(mean(out.output));
            const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
            total_ms += ms;
            std::size_t tokens = 0;
            for (const auto& r : out.reports) tokens += r.tokens;
            if (T == 1 && !reference.defined()) {
              reference = out.output.detach();
              reference_tokens = tokens;
            }
            const double seam = reference.defined()
                                    ? seam_rmse(out.output, reference, layout, mc.scale_factor * mc.patch_size)
                                    : std::numeric_limits<double>::quiet_NaN();
            std::ostringstream row;
            row.precision(10);
            row << step << ',' << T << ',' << layout.halo << ',' << out.reports[0].tokens << ',' << fwd.attention << ','
                << ms << ',' << seam << ',' << size << ',' << comp << ',' << tokens;
            rows.push_back(row.str());
          }
          const double per_sample = total_ms / static_cast<double>(std::max<std::size_t>(a.steps, 1));
          if (first_time == 0) first_time = per_sample;
          for (const auto& r : rows) csv << r << ',' << per_sample << ',' << first_time / per_sample << '\n';
          if (g.verbose) {
            std::cerr << "size " << size << " T " << T << " compression " << comp << ": " << per_sample << " ms/sample";
            if (reference_tokens) std::cerr << ", untiled tokens " << reference_tokens;
            std::cerr << '\n';
          }
        } catch (const std::bad_alloc&) {
          csv << "0," << T << ',' << a.halo << ",,,,," << size << ',' << comp << ",,allocation failure,\n";
        }
      }
    }
  }
  const fs::path path = out_dir / "bench.csv";
  write_text(path, csv.str());
  std::ostringstream cfg;
  cfg << "sizes=" << a.sizes << " tiles=" << a.tiles << " compression=" << a.compression << " halo=" << a.halo
      << " steps=" << a.steps << " dim=" << a.dim;
  write_run_manifest(out_dir, "bench", args, cfg.str(), {}, g.seed);
  std::cout << path.string() << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------- report

int cmd_report(const std::string& run, const Globals& g, const std::vector<std::string>& args) {
  const fs::path dir = run;
  if (!fs::is_directory(dir)) throw IoError("report: no run directory " + run);
  std::ostringstream md;
  md.precision(6);
  md << "# Run report: " << dir.filename().string() << "\n\n";
  std::vector<fs::path> inputs;
  if (fs::exists(dir / "validation.json")) {
    inputs.push_back(dir / "validation.json");
    const auto r = report_from_json(read_text(dir / "validation.json"));
    md << "## Held-out metrics (" << to_string(r.transform) << ")\n\n"
       << "| R2 | RMSE | RMSE >q68 | RMSE >q95 | RMSE >q99.7 | SSIM | PSNR |\n"
       << "|---|---|---|---|---|---|---|\n"
       << "| " << r.r2 << " | " << r.rmse << " | " << r.rmse_q68 << " | " << r.rmse_q95 << " | " << r.rmse_q997
       << " | " << r.ssim << " | " << r.psnr << " |\n\n"
       << "Quantile RMSE selects pixels whose truth exceeds the given percentile.\n\n";
  }
  if (fs::exists(dir / "loss.csv")) {
    inputs.push_back(dir / "loss.csv");
    std::istringstream in(read_text(dir / "loss.csv"));
    std::string line, first, last;
    std::getline(in, line);
    std::size_t steps = 0;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      if (first.empty()) first = line;
      last = line;
      ++steps;
    }
    md << "## Training\n\n" << steps << " steps.";
    if (steps) md << " First row: `" << first << "`. Last row: `" << last << "`.";
    md << "\n\n";
  }
  if (fs::exists(dir / "bench.csv")) {
    inputs.push_back(dir / "bench.csv");
    md << "## Benchmark\n\nFLOP columns are analytic multiply-add counts for compute only (no I/O).\n\n```\n"
       << read_text(dir / "bench.csv") << "```\n";
  }
  if (inputs.empty()) throw IoError("report: " + run + " holds no validation.json, loss.csv or bench.csv");
  const fs::path path = dir / "report.md";
  write_text(path, md.str());
  write_run_manifest(dir, "report", args, run, inputs, g.seed);
  std::cout << path.string() << '\n';
  return kExitOk;
}

}  // namespace

Grid predict_grid(ReslimModel<float>& model, const RunConfig& config, const Grid& input) {
  NoGradGuard no_grad;
  const Tensor<float> x = normalize_input(to_tensor<float>(input), config.model);
  Tensor<float> pred;
  if (config.tile_rows * config.tile_cols > 1) {
    const TileLayout layout = layout_for(config, input.height(), input.width());
    pred = tiled_forward(x, model, layout, config.workers).output;
  } else {
    pred = reslim_forward(x, model).pred;
  }
  std::vector<std::string> names;
  for (auto c : config.model.residual_channel_map) names.push_back(input.channel_names.at(c));
  return to_grid(denormalize_target(pred, config.model), input, names);
}

int run_cli(const std::vector<std::string>& args) {
  CLI::App app{"Climate-field downscaling toolkit"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--seed", g.seed, "Random seed");
  app.add_option("--threads", g.threads, "Worker threads")->check(CLI::PositiveNumber);
  app.add_flag("--verbose", g.verbose, "Progress output on stderr");

  GenArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Generate synthetic coarse/fine grid pairs");
  gen_cmd->add_option("--out", gen.out, "Output directory")->required();
  gen_cmd->add_option("--pairs", gen.pairs, "Number of pairs");
  gen_cmd->add_option("--size", gen.size, "Fine grid size HxW");
  gen_cmd->add_option("--scale", gen.scale, "Coarsening factor (2, 4 or 8)");
  gen_cmd->add_option("--channels", gen.channels, "Channels per grid");
  gen_cmd->add_option("--slope", gen.slope, "Spectral slope (negative)");

  TrainArgs train;
  auto* train_cmd = app.add_subcommand("train", "Train a model from a config file");
  train_cmd->add_option("--config", train.config, "INI config")->required();
  train_cmd->add_option("--out", train.out, "Override output directory");
  train_cmd->add_option("--data", train.data, "Override data directory");

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on grid pairs");
  eval_cmd->add_option("--config", ev.config, "Model config (model.ini of a run)");
  eval_cmd->add_option("--checkpoint", ev.checkpoint, "Checkpoint file");
  eval_cmd->add_option("--data", ev.data, "Data directory with manifest.json");
  eval_cmd->add_option("--out", ev.out, "Output directory")->required();
  eval_cmd->add_option("--split", ev.split, "test or all");
  eval_cmd->add_flag("--identity", ev.identity, "Score the targets against themselves");
  eval_cmd->add_flag("--spectrum", ev.spectrum, "Write radial power spectra per channel");

  BenchArgs bench;
  auto* bench_cmd = app.add_subcommand("bench", "Complexity and timing sweep");
  bench_cmd->add_option("--out", bench.out, "Output directory")->required();
  bench_cmd->add_option("--sizes", bench.sizes, "Comma-separated input sides");
  bench_cmd->add_option("--tiles", bench.tiles, "Comma-separated tile counts (perfect squares)");
  bench_cmd->add_option("--compression", bench.compression, "Comma-separated max patch sides or off");
  bench_cmd->add_option("--halo", bench.halo, "Halo width in input pixels");
  bench_cmd->add_option("--steps", bench.steps, "Timed steps per configuration");
  bench_cmd->add_option("--dim", bench.dim, "Embedding width");
  bench_cmd->add_option("--layers", bench.layers, "Transformer blocks");
  bench_cmd->add_option("--heads", bench.heads, "Attention heads");
  bench_cmd->add_option("--scale", bench.scale, "Upscaling factor");
  bench_cmd->add_option("--threshold", bench.threshold, "Edge-density split threshold");

  std::string run_dir;
  auto* report_cmd = app.add_subcommand("report", "Summarize a run directory");
  report_cmd->add_option("--run", run_dir, "Run directory")->required();

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }
  g.seed_given = app.count("--seed") > 0;
  Eigen::setNbThreads(1);

  try {
    if (*gen_cmd) return cmd_gen_data(gen, g, args);
    if (*train_cmd) return cmd_train(train, g, args);
    if (*eval_cmd) return cmd_eval(ev, g, args);
    if (*bench_cmd) return cmd_bench(bench, g, args);
    if (*report_cmd) return cmd_report(run_dir, g, args);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const ShapeError& e) {
    std::cerr << "data mismatch: " << e.what() << '\n';
    return kExitDataMismatch;
  } catch (const FormatError& e) {
    std::cerr << "data mismatch: " << e.what() << '\n';
    return kExitDataMismatch;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return kExitUsage;
}

int run_cli(int argc, char** argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run_cli(args);
}

}  // namespace downscale
