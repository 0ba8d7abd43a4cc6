#include "bat/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

#include "bat/errors.hpp"

namespace bat {

namespace {

constexpr char kMagic[8] = {'B', 'A', 'T', 'C', 'K', 'P', 'T', '1'};

static_assert(std::endian::native == std::endian::little,
              "checkpoint writer assumes a little-endian host");

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is, const char* what) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw DataError(std::string("checkpoint: truncated while reading ") + what);
  return v;
}

}  // namespace

void save_checkpoint(const std::string& path, const nlohmann::json& meta,
                     const ParamBlobs& params) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("checkpoint: cannot open " + path + " for writing");
  os.write(kMagic, sizeof(kMagic));
  const std::string meta_str = meta.dump();
  put<std::uint64_t>(os, meta_str.size());
  os.write(meta_str.data(), static_cast<std::streamsize>(meta_str.size()));
  put<std::uint64_t>(os, params.size());
  for (const auto& [name, blob] : params) {
    if (shape_size(blob.shape) != blob.values.size()) {
      throw DimensionError("checkpoint: " + name + " shape/value mismatch");
    }
    put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(blob.shape.size()));
    for (int d : blob.shape) put<std::uint32_t>(os, static_cast<std::uint32_t>(d));
    os.write(reinterpret_cast<const char*>(blob.values.data()),
             static_cast<std::streamsize>(blob.values.size() * sizeof(double)));
  }
  if (!os) throw DataError("checkpoint: write to " + path + " failed");
}

const TensorBlob* CheckpointData::find(const std::string& name) const {
  for (const auto& [n, blob] : params) {
    if (n == name) return &blob;
  }
  return nullptr;
}

CheckpointData load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("checkpoint: cannot open " + path);
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw DataError("checkpoint: " + path + " is not a BATCKPT1 file");
  }
  CheckpointData ck;
  const auto meta_len = get<std::uint64_t>(is, "metadata length");
  std::string meta_str(meta_len, '\0');
  is.read(meta_str.data(), static_cast<std::streamsize>(meta_len));
  if (!is) throw DataError("checkpoint: truncated metadata");
  ck.meta = nlohmann::json::parse(meta_str, nullptr, false);
  if (ck.meta.is_discarded()) throw DataError("checkpoint: corrupt metadata JSON");

  const auto count = get<std::uint64_t>(is, "parameter count");
  ck.params.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto name_len = get<std::uint32_t>(is, "name length");
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    const auto rank = get<std::uint32_t>(is, "rank");
    TensorBlob blob;
    blob.shape.resize(rank);
    for (auto& d : blob.shape) d = static_cast<int>(get<std::uint32_t>(is, "extent"));
    blob.values.resize(shape_size(blob.shape));
    is.read(reinterpret_cast<char*>(blob.values.data()),
            static_cast<std::streamsize>(blob.values.size() * sizeof(double)));
    if (!is) throw DataError("checkpoint: truncated tensor data for " + name);
    ck.params.emplace_back(std::move(name), std::move(blob));
  }
  return ck;
}

}  // namespace bat
