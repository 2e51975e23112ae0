#include "mtcp/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

#include "mtcp/errors.hpp"

namespace mtcp {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr const char* kConfigEntry = "meta.config";

template <class T>
void put(std::ofstream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <class T>
T get(std::ifstream& is, const std::filesystem::path& path) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof v)) throw IoError("checkpoint truncated: " + path.string());
  return v;
}

void put_tensor(std::ofstream& os, const std::string& name, const Shape& shape, std::span<const double> values) {
  put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
  os.write(name.data(), static_cast<std::streamsize>(name.size()));
  put<std::uint32_t>(os, static_cast<std::uint32_t>(shape.size()));
  for (auto d : shape) put<std::uint64_t>(os, d);
  os.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size() * sizeof(double)));
}

}  // namespace

const Tensor* Checkpoint::find(const std::string& name) const {
  for (const auto& e : entries) {
    if (e.name == name) return &e.tensor;
  }
  return nullptr;
}

void save_checkpoint(const std::filesystem::path& path, const nn::ParamSet& params, const std::string& config_text) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot write checkpoint " + path.string());
  os.write(kCheckpointMagic, 8);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(params.params.size() + params.buffers.size() + 1));
  for (const auto* group : {&params.params, &params.buffers}) {
    for (const auto& e : *group) put_tensor(os, e.name, e.tensor.shape(), e.tensor.values());
  }
  std::vector<double> bytes(config_text.begin(), config_text.end());
  put_tensor(os, kConfigEntry, {bytes.size()}, bytes);
  if (!os) throw IoError("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot read checkpoint " + path.string());
  char magic[8];
  if (!is.read(magic, 8)) throw IoError("checkpoint truncated: " + path.string());
  if (std::memcmp(magic, kCheckpointMagic, 4) != 0) throw IoError("not a checkpoint: " + path.string());
  if (std::memcmp(magic, kCheckpointMagic, 8) != 0) {
    throw IoError("checkpoint version mismatch: file has " + std::string(magic, 8) + ", expected " + kCheckpointMagic);
  }
  Checkpoint ck;
  const auto count = get<std::uint32_t>(is, path);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = get<std::uint32_t>(is, path);
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw IoError("checkpoint truncated: " + path.string());
    const auto rank = get<std::uint32_t>(is, path);
    Shape shape(rank);
    for (auto& d : shape) d = get<std::uint64_t>(is, path);
    std::vector<double> values(shape_numel(shape));
    if (!is.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(values.size() * sizeof(double)))) {
      throw IoError("checkpoint truncated: " + path.string());
    }
    if (name == kConfigEntry) {
      ck.config_text.assign(values.begin(), values.end());
    } else {
      ck.entries.push_back({std::move(name), Tensor::from(std::move(shape), std::move(values))});
    }
  }
  return ck;
}

void restore(const Checkpoint& checkpoint, const nn::ParamSet& params) {
  for (const auto* group : {&params.params, &params.buffers}) {
    for (const auto& e : *group) {
      const Tensor* src = checkpoint.find(e.name);
      if (src == nullptr) throw StateError("checkpoint has no entry '" + e.name + "'");
      if (src->shape() != e.tensor.shape()) {
        throw StateError("checkpoint entry '" + e.name + "' has shape " + shape_str(src->shape()) + ", model expects " +
                         shape_str(e.tensor.shape()));
      }
      Tensor dst = e.tensor;
      std::copy(src->values().begin(), src->values().end(), dst.values().begin());
    }
  }
}

}  // namespace mtcp
