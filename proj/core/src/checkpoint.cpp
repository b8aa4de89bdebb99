#include "hulm/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include "hulm/error.hpp"

namespace hulm {

static_assert(std::endian::native == std::endian::little, "checkpoint payloads are written in host order");

namespace {

using nlohmann::json;

constexpr char kMagic[4] = {'H', 'U', 'L', 'M'};

template <class T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <class T>
T get(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  if (static_cast<std::size_t>(in.gcount()) != sizeof v) throw DataError("truncated container");
  return v;
}

}  // namespace

void write_container(std::ostream& out, const json& metadata,
                     const std::vector<std::pair<std::string, const Matrix*>>& tensors) {
  json header;
  header["metadata"] = metadata;
  header["tensors"] = json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, m] : tensors) {
    header["tensors"].push_back({{"name", name},
                                 {"shape", {m->rows(), m->cols()}},
                                 {"dtype", "f64"},
                                 {"offset", offset}});
    offset += static_cast<std::uint64_t>(m->size()) * sizeof(double);
  }
  const std::string text = header.dump();
  out.write(kMagic, 4);
  put<std::uint32_t>(out, kContainerVersion);
  put<std::uint64_t>(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& [name, m] : tensors) {
    out.write(reinterpret_cast<const char*>(m->data()), static_cast<std::streamsize>(m->size() * sizeof(double)));
  }
  if (!out) throw RuntimeFailure("failed to write container");
}

TensorContainer read_container(std::istream& in) {
  char magic[4];
  in.read(magic, 4);
  if (in.gcount() != 4 || std::memcmp(magic, kMagic, 4) != 0) throw DataError("not a HULM container");
  const auto version = get<std::uint32_t>(in);
  if (version != kContainerVersion) throw DataError("unsupported container version " + std::to_string(version));
  const auto header_len = get<std::uint64_t>(in);
  std::string text(header_len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(header_len));
  if (static_cast<std::uint64_t>(in.gcount()) != header_len) throw DataError("truncated container header");
  json header;
  try {
    header = json::parse(text);
  } catch (const json::exception& e) {
    throw DataError(std::string("bad container header: ") + e.what());
  }
  std::string payload((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  TensorContainer c;
  c.metadata = header.value("metadata", json::object());
  for (const auto& t : header.at("tensors")) {
    if (t.at("dtype") != "f64") throw DataError("unsupported tensor dtype");
    const auto rows = t.at("shape").at(0).get<Eigen::Index>();
    const auto cols = t.at("shape").at(1).get<Eigen::Index>();
    const auto offset = t.at("offset").get<std::uint64_t>();
    const auto bytes = static_cast<std::uint64_t>(rows * cols) * sizeof(double);
    if (offset + bytes > payload.size()) throw DataError("tensor payload out of range");
    Matrix m(rows, cols);
    std::memcpy(m.data(), payload.data() + offset, bytes);
    c.tensors.emplace(t.at("name").get<std::string>(), std::move(m));
  }
  return c;
}

void save_checkpoint(std::ostream& out, const Checkpoint& ck) {
  json meta = ck.metadata;
  meta["config"] = to_json(ck.params.config);
  if (ck.adapter) {
    meta["lora"] = {{"rank", ck.adapter->rank}, {"alpha", ck.adapter->alpha}};
  } else {
    meta["lora"] = nullptr;
  }
  auto tensors = ck.params.named_tensors();
  if (ck.adapter) {
    for (auto& entry : ck.adapter->named_tensors()) tensors.push_back(entry);
  }
  write_container(out, meta, tensors);
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw RuntimeFailure("cannot write " + path.string());
  save_checkpoint(out, ck);
}

Checkpoint load_checkpoint(std::istream& in) {
  auto c = read_container(in);
  Checkpoint ck;
  if (!c.metadata.contains("config")) throw DataError("checkpoint without model config");
  const auto config = model_config_from_json(c.metadata["config"]);
  ck.params = zeros_like(init_parameters(ModelConfig{config}));
  auto fill = [&](const std::string& name, Matrix* m) {
    auto it = c.tensors.find(name);
    if (it == c.tensors.end()) throw DataError("checkpoint is missing tensor " + name);
    if (it->second.rows() != m->rows() || it->second.cols() != m->cols()) {
      throw DataError("shape mismatch for tensor " + name);
    }
    *m = it->second;
  };
  for (auto& [name, m] : ck.params.named_tensors()) fill(name, m);
  if (c.metadata.contains("lora") && !c.metadata["lora"].is_null()) {
    const auto rank = c.metadata["lora"].at("rank").get<std::size_t>();
    const auto alpha = c.metadata["lora"].at("alpha").get<double>();
    ck.adapter = init_lora(config, rank, alpha);
    for (auto& [name, m] : ck.adapter->named_tensors()) fill(name, m);
  }
  ck.metadata = c.metadata;
  ck.metadata.erase("config");
  ck.metadata.erase("lora");
  return ck;
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return load_checkpoint(in);
}

}  // namespace hulm
