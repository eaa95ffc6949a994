#include "config.hpp"

#include <fstream>
#include <sstream>

#include "json.hpp"

namespace logvm::cli {

using nlohmann::ordered_json;

RunConfig default_config() {
  RunConfig cfg;
  cfg.train.model = seg::ModelConfig::toy(blocks::Variant::LocalGlobal);
  cfg.train.task.kind = train::TaskKind::BlobsAll;
  cfg.train.epochs = 50;
  cfg.train.lr = 2e-3;
  cfg.train.out_dir = "logvm_out";
  return cfg;
}

namespace {

struct StageArrays {
  std::vector<std::size_t> channels, pool, squeeze, gamma;
  std::vector<std::vector<std::size_t>> gtx_stride;
  std::vector<bool> blocks;

  static StageArrays from(const seg::ModelConfig& m) {
    StageArrays a;
    for (const auto& s : m.stages) {
      a.channels.push_back(s.channels);
      a.pool.push_back(s.pool);
      a.squeeze.push_back(s.squeeze);
      a.gamma.push_back(s.gamma);
      a.gtx_stride.push_back(s.gtx_stride);
      a.blocks.push_back(s.mamba_block);
    }
    return a;
  }

  std::vector<seg::StageConfig> build() const {
    const std::size_t n = channels.size();
    if (pool.size() != n || squeeze.size() != n || gamma.size() != n || gtx_stride.size() != n || blocks.size() != n) {
      throw ConfigError("config: stage_* arrays must all have the same length");
    }
    std::vector<seg::StageConfig> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = {channels[i], pool[i], gtx_stride[i], squeeze[i], gamma[i], blocks[i]};
    return out;
  }
};

template <class T>
T get(const ordered_json& v, const std::string& key) {
  try {
    return v.get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("config: key '" + key + "' has the wrong type");
  }
}

}  // namespace

RunConfig parse_config(const std::string& json_text) {
  ordered_json doc;
  try {
    doc = ordered_json::parse(json_text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("config: invalid JSON: ") + e.what());
  }
  if (!doc.is_object()) throw ConfigError("config: top level must be an object");

  RunConfig cfg = default_config();
  auto& t = cfg.train;
  auto& m = t.model;
  auto& b = m.block;
  StageArrays stages = StageArrays::from(m);

  for (const auto& [key, v] : doc.items()) {
    try {
      if (key == "height") m.height = get<std::size_t>(v, key);
      else if (key == "width") m.width = get<std::size_t>(v, key);
      else if (key == "in_channels") m.in_channels = get<std::size_t>(v, key);
      else if (key == "classes") m.classes = get<std::size_t>(v, key);
      else if (key == "stage_channels") stages.channels = get<std::vector<std::size_t>>(v, key);
      else if (key == "stage_pool") stages.pool = get<std::vector<std::size_t>>(v, key);
      else if (key == "stage_gtx_stride") stages.gtx_stride = get<std::vector<std::vector<std::size_t>>>(v, key);
      else if (key == "stage_squeeze") stages.squeeze = get<std::vector<std::size_t>>(v, key);
      else if (key == "stage_gamma") stages.gamma = get<std::vector<std::size_t>>(v, key);
      else if (key == "decoder_blocks") stages.blocks = get<std::vector<bool>>(v, key);
      else if (key == "variant") b.variant = blocks::parse_variant(get<std::string>(v, key));
      else if (key == "expansion") b.expansion = get<std::size_t>(v, key);
      else if (key == "directions") b.directions = get<std::size_t>(v, key);
      else if (key == "window") b.window = get<std::size_t>(v, key);
      else if (key == "strategy") b.strategy = parse_strategy(get<std::string>(v, key));
      else if (key == "state_dim") b.state_dim = get<std::size_t>(v, key);
      else if (key == "dwc_kernel") b.dwc_kernel = get<std::size_t>(v, key);
      else if (key == "gtx_kernel") b.gtx_kernel = get<std::size_t>(v, key);
      else if (key == "gtx_dilation") b.gtx_dilation = get<std::size_t>(v, key);
      else if (key == "parallel_scan") b.parallel_scan = get<bool>(v, key);
      else if (key == "scan_chunk") b.scan_chunk = get<std::size_t>(v, key);
      else if (key == "task") t.task.kind = train::parse_task(get<std::string>(v, key));
      else if (key == "min_blobs") t.task.min_blobs = get<std::size_t>(v, key);
      else if (key == "max_blobs") t.task.max_blobs = get<std::size_t>(v, key);
      else if (key == "min_radius") t.task.min_radius = get<double>(v, key);
      else if (key == "max_radius") t.task.max_radius = get<double>(v, key);
      else if (key == "noise") t.task.noise = get<double>(v, key);
      else if (key == "data_seed") t.task.seed = get<std::uint64_t>(v, key);
      else if (key == "train_count") t.train_count = get<std::size_t>(v, key);
      else if (key == "val_count") t.val_count = get<std::size_t>(v, key);
      else if (key == "epochs") t.epochs = get<std::size_t>(v, key);
      else if (key == "batch") t.batch = get<std::size_t>(v, key);
      else if (key == "lr") t.lr = get<double>(v, key);
      else if (key == "stop_dice") t.stop_dice = get<double>(v, key);
      else if (key == "seed") t.seed = get<std::uint64_t>(v, key);
      else if (key == "seeds") cfg.seeds = get<std::size_t>(v, key);
      else if (key == "threads") cfg.threads = get<std::size_t>(v, key);
      else if (key == "out_dir") t.out_dir = get<std::string>(v, key);
      else throw ConfigError("config: unknown key '" + key + "'");
    } catch (const std::invalid_argument& e) {
      throw ConfigError("config: key '" + key + "': " + e.what());
    }
  }
  m.stages = stages.build();
  t.task.size = m.height;
  try {
    m.validate();
  } catch (const std::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  if (t.batch == 0) throw ConfigError("config: batch must be >= 1");
  if (t.lr < 0) throw ConfigError("config: lr must be >= 0");
  if (cfg.seeds == 0) throw ConfigError("config: seeds must be >= 1");
  return cfg;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("config: cannot read " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str());
}

std::string to_json(const RunConfig& cfg) {
  const auto& t = cfg.train;
  const auto& m = t.model;
  const auto& b = m.block;
  const StageArrays s = StageArrays::from(m);
  ordered_json j;
  j["height"] = m.height;
  j["width"] = m.width;
  j["in_channels"] = m.in_channels;
  j["classes"] = m.classes;
  j["stage_channels"] = s.channels;
  j["stage_pool"] = s.pool;
  j["stage_gtx_stride"] = s.gtx_stride;
  j["stage_squeeze"] = s.squeeze;
  j["stage_gamma"] = s.gamma;
  j["decoder_blocks"] = s.blocks;
  j["variant"] = blocks::to_string(b.variant);
  j["expansion"] = b.expansion;
  j["directions"] = b.directions;
  j["window"] = b.window;
  j["strategy"] = to_string(b.strategy);
  j["state_dim"] = b.state_dim;
  j["dwc_kernel"] = b.dwc_kernel;
  j["gtx_kernel"] = b.gtx_kernel;
  j["gtx_dilation"] = b.gtx_dilation;
  j["parallel_scan"] = b.parallel_scan;
  j["scan_chunk"] = b.scan_chunk;
  j["task"] = train::to_string(t.task.kind);
  j["min_blobs"] = t.task.min_blobs;
  j["max_blobs"] = t.task.max_blobs;
  j["min_radius"] = t.task.min_radius;
  j["max_radius"] = t.task.max_radius;
  j["noise"] = t.task.noise;
  j["data_seed"] = t.task.seed;
  j["train_count"] = t.train_count;
  j["val_count"] = t.val_count;
  j["epochs"] = t.epochs;
  j["batch"] = t.batch;
  j["lr"] = t.lr;
  j["stop_dice"] = t.stop_dice;
  j["seed"] = t.seed;
  j["seeds"] = cfg.seeds;
  j["threads"] = cfg.threads;
  j["out_dir"] = t.out_dir.string();
  return j.dump(2) + "\n";
}

}  // namespace logvm::cli
