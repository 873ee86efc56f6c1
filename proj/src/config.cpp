#include "downscale/config.hpp"

#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "downscale/error.hpp"

namespace downscale {

namespace pt = boost::property_tree;

namespace {

const std::map<std::string, std::set<std::string>>& known_keys() {
  static const std::map<std::string, std::set<std::string>> keys = {
      {"model",
       {"preset", "embed_dim", "num_layers", "num_heads", "patch_size", "in_channels", "out_channels",
        "scale_factor", "conv_hidden", "residual_channel_map", "norm_mean", "norm_std"}},
      {"compression", {"enabled", "min_side", "max_side", "threshold"}},
      {"loss", {"tv_weight", "huber_delta"}},
      {"train",
       {"steps", "batch_size", "lr", "seed", "workers", "tile_rows", "tile_cols", "halo", "eval_every",
        "train_fraction"}},
      {"data", {"dir", "out"}},
      {"eval", {"transform"}},
  };
  return keys;
}

template <typename V>
std::vector<V> parse_list(const std::string& text, const std::string& key) {
  std::vector<V> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::stringstream is(item);
    V v;
    if (!(is >> v)) throw ConfigError("config: cannot parse '" + item + "' in " + key);
    out.push_back(v);
  }
  return out;
}

template <typename V>
std::string join(const std::vector<V>& values) {
  std::ostringstream out;
  out.precision(17);
  for (std::size_t i = 0; i < values.size(); ++i) out << (i ? "," : "") << values[i];
  return out.str();
}

template <typename V>
V get(const pt::ptree& tree, const std::string& path, V fallback) {
  if (!tree.get_child_optional(path)) return fallback;
  try {
    return tree.get<V>(path);
  } catch (const pt::ptree_error& e) {
    throw ConfigError("config: bad value for " + path + ": " + e.what());
  }
}

}  // namespace

void RunConfig::validate() const {
  model.validate();
  if (steps > 0 && batch_size == 0) throw ConfigError("config: batch_size must be positive");
  if (workers == 0) throw ConfigError("config: workers must be positive");
  if (tile_rows == 0 || tile_cols == 0) throw ConfigError("config: tile grid must be at least 1x1");
  if (halo % model.patch_size != 0) throw ConfigError("config: halo must be a multiple of patch_size");
  if (!(lr >= 0)) throw ConfigError("config: lr must be >= 0");
  if (!(train_fraction > 0 && train_fraction <= 1)) throw ConfigError("config: train_fraction must lie in (0, 1]");
}

RunConfig parse_run_config(const std::string& text) {
  pt::ptree tree;
  std::istringstream in(text);
  try {
    pt::ini_parser::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  const auto& known = known_keys();
  for (const auto& [section, body] : tree) {
    auto it = known.find(section);
    if (it == known.end()) {
      if (body.empty()) throw ConfigError("config: key '" + section + "' outside any section");
      throw ConfigError("config: unknown section [" + section + "]");
    }
    for (const auto& [key, value] : body) {
      if (!it->second.contains(key)) throw ConfigError("config: unknown key '" + key + "' in [" + section + "]");
    }
  }

  RunConfig c;
  if (auto preset = tree.get_optional<std::string>("model.preset")) c.model = reslim_preset(*preset);
  auto& m = c.model;
  m.embed_dim = get(tree, "model.embed_dim", m.embed_dim);
  m.num_layers = get(tree, "model.num_layers", m.num_layers);
  m.num_heads = get(tree, "model.num_heads", m.num_heads);
  m.patch_size = get(tree, "model.patch_size", m.patch_size);
  m.in_channels = get(tree, "model.in_channels", m.in_channels);
  m.out_channels = get(tree, "model.out_channels", m.out_channels);
  m.scale_factor = get(tree, "model.scale_factor", m.scale_factor);
  m.conv_hidden = get(tree, "model.conv_hidden", m.conv_hidden);
  if (auto map = tree.get_optional<std::string>("model.residual_channel_map")) {
    m.residual_channel_map = parse_list<std::size_t>(*map, "residual_channel_map");
  } else {
    m.residual_channel_map.clear();
    for (std::size_t k = 0; k < m.out_channels; ++k) m.residual_channel_map.push_back(k % m.in_channels);
  }
  const auto mean = tree.get_optional<std::string>("model.norm_mean");
  const auto sd = tree.get_optional<std::string>("model.norm_std");
  if (mean.has_value() != sd.has_value()) throw ConfigError("config: norm_mean and norm_std must be given together");
  m.norm.assign(m.in_channels, ChannelNorm{});
  if (mean) {
    const auto mv = parse_list<double>(*mean, "norm_mean");
    const auto sv = parse_list<double>(*sd, "norm_std");
    if (mv.size() != m.in_channels || sv.size() != m.in_channels) {
      throw ConfigError("config: norm_mean/norm_std need one entry per input channel");
    }
    for (std::size_t i = 0; i < mv.size(); ++i) m.norm[i] = {mv[i], sv[i]};
    c.norm_from_data = false;
  }
  m.compression = get(tree, "compression.enabled", m.compression);
  m.compression_settings.min_side = get(tree, "compression.min_side", m.compression_settings.min_side);
  m.compression_settings.max_side = get(tree, "compression.max_side", m.compression_settings.max_side);
  m.compression_settings.threshold = get(tree, "compression.threshold", m.compression_settings.threshold);
  m.tv_weight = get(tree, "loss.tv_weight", m.tv_weight);
  m.huber_delta = get(tree, "loss.huber_delta", m.huber_delta);

  c.halo = 2 * m.patch_size;
  c.steps = get(tree, "train.steps", c.steps);
  c.batch_size = get(tree, "train.batch_size", c.batch_size);
  c.lr = get(tree, "train.lr", c.lr);
  c.seed = get(tree, "train.seed", c.seed);
  c.workers = get(tree, "train.workers", c.workers);
  c.tile_rows = get(tree, "train.tile_rows", c.tile_rows);
  c.tile_cols = get(tree, "train.tile_cols", c.tile_cols);
  c.halo = get(tree, "train.halo", c.halo);
  c.eval_every = get(tree, "train.eval_every", c.eval_every);
  c.train_fraction = get(tree, "train.train_fraction", c.train_fraction);
  c.data_dir = get(tree, "data.dir", c.data_dir);
  c.out_dir = get(tree, "data.out", c.out_dir);
  c.transform = transform_from_string(get<std::string>(tree, "eval.transform", "none"));
  c.validate();
  return c;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str());
}

std::string format_run_config(const RunConfig& c) {
  const auto& m = c.model;
  std::ostringstream out;
  out.precision(17);
  out << "[model]\n"
      << "embed_dim = " << m.embed_dim << "\nnum_layers = " << m.num_layers << "\nnum_heads = " << m.num_heads
      << "\npatch_size = " << m.patch_size << "\nin_channels = " << m.in_channels
      << "\nout_channels = " << m.out_channels << "\nscale_factor = " << m.scale_factor
      << "\nconv_hidden = " << m.conv_hidden << "\nresidual_channel_map = " << join(m.residual_channel_map) << '\n';
  if (!c.norm_from_data) {
    std::vector<double> mean, sd;
    for (const auto& n : m.norm) {
      mean.push_back(n.mean);
      sd.push_back(n.std);
    }
    out << "norm_mean = " << join(mean) << "\nnorm_std = " << join(sd) << '\n';
  }
  out << "\n[compression]\nenabled = " << (m.compression ? "true" : "false")
      << "\nmin_side = " << m.compression_settings.min_side << "\nmax_side = " << m.compression_settings.max_side
      << "\nthreshold = " << m.compression_settings.threshold << '\n';
  out << "\n[loss]\ntv_weight = " << m.tv_weight << "\nhuber_delta = " << m.huber_delta << '\n';
  out << "\n[train]\nsteps = " << c.steps << "\nbatch_size = " << c.batch_size << "\nlr = " << c.lr
      << "\nseed = " << c.seed << "\nworkers = " << c.workers << "\ntile_rows = " << c.tile_rows
      << "\ntile_cols = " << c.tile_cols << "\nhalo = " << c.halo << "\neval_every = " << c.eval_every
      << "\ntrain_fraction = " << c.train_fraction << '\n';
  out << "\n[data]\ndir = " << c.data_dir << "\nout = " << c.out_dir << '\n';
  out << "\n[eval]\ntransform = " << to_string(c.transform) << '\n';
  return out.str();
}

}  // namespace downscale
