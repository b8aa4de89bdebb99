#include "hulm_cli/run_config.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include "hulm/error.hpp"

namespace hulm::cli {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const char* what) {
  throw ConfigError("invalid value '" + value + "' for " + key + ": expected " + what);
}

}  // namespace

const std::string& RunConfig::str(const std::string& key) const {
  const auto it = values_.find(key);
  if (it == values_.end()) throw std::logic_error("unregistered config key " + key);
  return it->second;
}

double RunConfig::real(const std::string& key) const {
  const auto& v = str(key);
  double out = 0.0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size() || !std::isfinite(out)) bad_value(key, v, "a number");
  return out;
}

std::uint64_t RunConfig::u64(const std::string& key) const {
  const auto& v = str(key);
  std::uint64_t out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) bad_value(key, v, "a non-negative integer");
  return out;
}

std::size_t RunConfig::count(const std::string& key) const { return static_cast<std::size_t>(u64(key)); }

bool RunConfig::flag(const std::string& key) const {
  std::string v = str(key);
  std::transform(v.begin(), v.end(), v.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  if (v == "on" || v == "true" || v == "1" || v == "yes") return true;
  if (v == "off" || v == "false" || v == "0" || v == "no") return false;
  bad_value(key, str(key), "on or off");
}

std::vector<std::string> RunConfig::list(const std::string& key) const {
  std::vector<std::string> out;
  std::stringstream ss(str(key));
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::optional<std::filesystem::path> RunConfig::path(const std::string& key) const {
  const auto& v = str(key);
  if (v.empty()) return std::nullopt;
  return std::filesystem::path(v);
}

std::filesystem::path RunConfig::required_path(const std::string& key) const {
  auto p = path(key);
  if (!p) throw ConfigError("missing required setting " + key);
  return *p;
}

nlohmann::json RunConfig::to_json() const {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [k, v] : values_) j[k] = v;
  return j;
}

std::map<std::string, std::string> default_values(const std::string& subcommand) {
  std::map<std::string, std::string> d{
      {"run.seed", "42"},
      {"run.threads", "1"},

      {"corpus.input", ""},
      {"corpus.ascii_threshold", "0.9"},
      {"corpus.stopword_threshold", "0.15"},
      {"corpus.toxic_lexicon", ""},
      {"corpus.toxic_max_hits", "0"},
      {"corpus.replace_mentions", "on"},

      {"data.input", ""},
      {"data.train", ""},
      {"data.dev", ""},
      {"data.test", ""},

      {"pack.mode", "hulm"},
      {"pack.max_len", "0"},
      {"pack.bos", "off"},
      {"pack.pool_separator", "off"},

      {"model.checkpoint", ""},
      {"model.d_model", "64"},
      {"model.n_layers", "2"},
      {"model.n_heads", "4"},
      {"model.d_ff", "256"},
      {"model.max_positions", "8192"},
      {"model.tied_head", "off"},

      {"train.lr", "3e-4"},
      {"train.batch_size", "8"},
      {"train.batch_tokens", "0"},
      {"train.epochs", "5"},
      {"train.patience", "6"},
      {"train.trainable", "adapter"},
      {"train.lora_rank", "8"},
      {"train.lora_alpha", "16"},
      {"train.quantize", "off"},
      {"train.quant_block", "64"},
      {"train.merge_adapter", "off"},

      {"task.name", "task"},
      {"task.level", "document"},
      {"task.objective", "classification"},
      {"task.n_classes", "2"},
      {"task.head", ""},

      {"finetune.styles", "huft"},
      {"finetune.seeds", "42"},

      {"probe.include_history", "on"},

      {"evaluate.predictions", ""},
      {"evaluate.labels", ""},
      {"evaluate.baseline", ""},
      {"evaluate.test", "permutation"},
      {"evaluate.permutations", "10000"},
      {"evaluate.alpha", "0.05"},

      {"synth.n_authors", "200"},
      {"synth.docs_per_author", "64"},
      {"synth.doc_len", "4"},
      {"synth.style_strength", "0.8"},
      {"synth.n_clusters", "4"},
      {"synth.language_seed", "1"},
      {"synth.cluster_scale", "1.5"},
      {"synth.trait_scale", "0.7"},
      {"synth.shared_trait_axis", "off"},
  };
  if (subcommand == "probe") {
    d["train.lr"] = "1e-2";
    d["train.epochs"] = "200";
    d["train.patience"] = "20";
    d["train.batch_size"] = "32";
  }
  return d;
}

std::map<std::string, std::string> read_config_file(const std::filesystem::path& path,
                                                    const std::map<std::string, std::string>& known) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::map<std::string, std::string> out;
  auto put = [&](const std::string& key, const std::string& value) {
    if (!known.count(key)) throw ConfigError("unknown config key '" + key + "' in " + path.string());
    out[key] = value;
  };

  if (path.extension() == ".json") {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("malformed config file " + path.string() + ": " + e.what());
    }
    if (!j.is_object()) throw ConfigError("config file " + path.string() + " is not an object");
    for (const auto& [k, v] : j.items()) {
      if (k == "subcommand") continue;  // recorded by RunDir, not a setting
      put(k, v.is_string() ? v.get<std::string>() : v.dump());
    }
    return out;
  }

  std::string section;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find_first_of("#;");
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(path.string() + ":" + std::to_string(line_no) + ": bad section header");
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(path.string() + ":" + std::to_string(line_no) + ": expected key = value");
    }
    const std::string key = trim(line.substr(0, eq));
    put(section.empty() ? key : section + "." + key, trim(line.substr(eq + 1)));
  }
  return out;
}

RunConfig resolve_config(const std::string& subcommand, const std::optional<std::filesystem::path>& file,
                         const std::map<std::string, std::string>& flags) {
  auto values = default_values(subcommand);
  if (file) {
    for (auto& [k, v] : read_config_file(*file, values)) values[k] = v;
  }
  for (const auto& [k, v] : flags) {
    if (!values.count(k)) throw ConfigError("unknown config key '" + k + "'");
    values[k] = v;
  }
  return RunConfig(std::move(values));
}

}  // namespace hulm::cli
