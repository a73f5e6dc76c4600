#pragma once

// Weight archives: a JSON manifest naming every tensor plus one contiguous
// little-endian float64 blob. Files are written to a temporary name and
// renamed into place so a reader never sees a half-written archive.

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "acelab/errors.hpp"
#include "acelab/nn.hpp"
#include "json.hpp"

namespace acelab {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr int kArchiveFormatVersion = 1;

/// Writes `contents` to `path` via a sibling temp file and rename.
inline void write_atomic(const fs::path& path, const std::string& contents) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open " + tmp.string() + " for writing");
    os.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!os) throw IoError("short write to " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

inline std::string read_file(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

struct ArchivedTensor {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

struct WeightArchive {
  std::string model_kind;
  json meta = json::object();
  std::vector<ArchivedTensor> tensors;

  static WeightArchive from_state(std::string kind, const ParameterList& state, json meta = json::object()) {
    WeightArchive a{std::move(kind), std::move(meta), {}};
    for (const auto& p : state)
      a.tensors.push_back({p.name, p.tensor.shape(), {p.tensor.values().begin(), p.tensor.values().end()}});
    return a;
  }

  const ArchivedTensor* find(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return &t;
    return nullptr;
  }

  /// Copies archived values into `dst` by name. Every entry of `dst` must be
  /// present with the same shape; extra archive entries are an error too.
  void restore(const ParameterList& dst) const {
    if (dst.size() != tensors.size()) {
      throw ValidationError("archive '" + model_kind + "' holds " + std::to_string(tensors.size()) +
                            " tensors, model expects " + std::to_string(dst.size()));
    }
    for (const auto& p : dst) {
      const ArchivedTensor* t = find(p.name);
      if (!t) throw ValidationError("archive '" + model_kind + "' has no tensor " + p.name);
      if (t->shape != p.tensor.shape()) {
        throw ValidationError("archive tensor " + p.name + " has shape " + shape_str(t->shape) +
                              ", model expects " + shape_str(p.tensor.shape()));
      }
      Tensor d = p.tensor;
      std::copy(t->values.begin(), t->values.end(), d.mutable_values().begin());
    }
  }
};

namespace detail {

inline std::uint64_t to_little(std::uint64_t v) {
  if constexpr (std::endian::native == std::endian::big) return __builtin_bswap64(v);
  return v;
}

}  // namespace detail

/// Writes `<base>.json` and `<base>.bin`.
inline void save_archive(const WeightArchive& a, const fs::path& base) {
  fs::path manifest_path = base, blob_path = base;
  manifest_path += ".json";
  blob_path += ".bin";
  std::string blob;
  json entries = json::array();
  for (const auto& t : a.tensors) {
    if (numel(t.shape) != t.values.size()) throw ShapeError("archive tensor " + t.name + " has wrong size");
    const std::size_t offset = blob.size();
    for (double v : t.values) {
      std::uint64_t bits = 0;
      std::memcpy(&bits, &v, sizeof bits);
      bits = detail::to_little(bits);
      char raw[8];
      std::memcpy(raw, &bits, 8);
      blob.append(raw, 8);
    }
    entries.push_back({{"name", t.name},
                       {"shape", t.shape},
                       {"dtype", "f64"},
                       {"offset", offset},
                       {"length", blob.size() - offset}});
  }
  const json manifest{{"format_version", kArchiveFormatVersion},
                      {"model_kind", a.model_kind},
                      {"meta", a.meta},
                      {"blob", blob_path.filename().string()},
                      {"blob_bytes", blob.size()},
                      {"tensors", entries}};
  // blob first: a manifest only ever points at a complete blob
  write_atomic(blob_path, blob);
  write_atomic(manifest_path, manifest.dump(2) + "\n");
}

inline bool archive_exists(const fs::path& base) {
  fs::path m = base, b = base;
  m += ".json";
  b += ".bin";
  return fs::exists(m) && fs::exists(b);
}

inline WeightArchive load_archive(const fs::path& base) {
  fs::path manifest_path = base;
  manifest_path += ".json";
  json manifest;
  try {
    manifest = json::parse(read_file(manifest_path));
  } catch (const json::exception& e) {
    throw ValidationError(manifest_path.string() + ": " + e.what());
  }
  try {
    if (manifest.at("format_version").get<int>() != kArchiveFormatVersion) {
      throw ValidationError(manifest_path.string() + ": unsupported format_version");
    }
    const fs::path blob_path = base.parent_path() / manifest.at("blob").get<std::string>();
    const std::string blob = read_file(blob_path);
    if (blob.size() != manifest.at("blob_bytes").get<std::size_t>()) {
      throw ValidationError(blob_path.string() + ": blob size does not match manifest");
    }
    WeightArchive a;
    a.model_kind = manifest.at("model_kind").get<std::string>();
    a.meta = manifest.at("meta");
    std::vector<std::pair<std::size_t, std::size_t>> spans;
    for (const auto& e : manifest.at("tensors")) {
      ArchivedTensor t;
      t.name = e.at("name").get<std::string>();
      t.shape = e.at("shape").get<Shape>();
      if (e.at("dtype").get<std::string>() != "f64") throw ValidationError("tensor " + t.name + ": dtype must be f64");
      const auto offset = e.at("offset").get<std::size_t>();
      const auto length = e.at("length").get<std::size_t>();
      if (length != 8 * numel(t.shape)) throw ValidationError("tensor " + t.name + ": length does not match shape");
      if (offset > blob.size() || length > blob.size() - offset) {
        throw ValidationError("tensor " + t.name + ": byte range outside the blob");
      }
      spans.emplace_back(offset, length);
      t.values.resize(length / 8);
      for (std::size_t i = 0; i < t.values.size(); ++i) {
        std::uint64_t bits = 0;
        std::memcpy(&bits, blob.data() + offset + 8 * i, 8);
        bits = detail::to_little(bits);
        std::memcpy(&t.values[i], &bits, 8);
      }
      a.tensors.push_back(std::move(t));
    }
    std::sort(spans.begin(), spans.end());
    for (std::size_t i = 1; i < spans.size(); ++i)
      if (spans[i - 1].first + spans[i - 1].second > spans[i].first) {
        throw ValidationError(manifest_path.string() + ": overlapping tensor byte ranges");
      }
    return a;
  } catch (const json::exception& e) {
    throw ValidationError(manifest_path.string() + ": " + e.what());
  }
}

}  // namespace acelab
