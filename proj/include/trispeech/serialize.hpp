#ifndef TRISPEECH_SERIALIZE_HPP
#define TRISPEECH_SERIALIZE_HPP

// Versioned binary checkpoint: a JSON config echo followed by named f32
// parameter blobs. Optimizer moments and the teacher copy ride along as
// prefixed blobs when a run is saved mid-training.

#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "trispeech/common.hpp"
#include "trispeech/tensor.hpp"

namespace trispeech {

struct BlobFile {
  std::string config_json;
  std::vector<std::pair<std::string, TensorData<float>>> blobs;

  const TensorData<float>* find(const std::string& name) const {
    for (const auto& [n, t] : blobs)
      if (n == name) return &t;
    return nullptr;
  }

  void save(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open " + path + " for writing");
    const uint32_t magic = 0x5453434b;  // "TSCK"
    const uint32_t version = 1;
    os.write(reinterpret_cast<const char*>(&magic), 4);
    os.write(reinterpret_cast<const char*>(&version), 4);
    auto put_str = [&](const std::string& s) {
      const uint64_t n = s.size();
      os.write(reinterpret_cast<const char*>(&n), 8);
      os.write(s.data(), static_cast<std::streamsize>(n));
    };
    put_str(config_json);
    const uint64_t count = blobs.size();
    os.write(reinterpret_cast<const char*>(&count), 8);
    for (const auto& [name, t] : blobs) {
      put_str(name);
      const uint32_t ndim = static_cast<uint32_t>(t.shape.size());
      os.write(reinterpret_cast<const char*>(&ndim), 4);
      for (int64_t d : t.shape) os.write(reinterpret_cast<const char*>(&d), 8);
      os.write(reinterpret_cast<const char*>(t.data.data()),
               static_cast<std::streamsize>(t.data.size() * sizeof(float)));
    }
    if (!os) throw IoError("write failed for " + path);
  }

  static BlobFile load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path);
    uint32_t magic = 0, version = 0;
    is.read(reinterpret_cast<char*>(&magic), 4);
    is.read(reinterpret_cast<char*>(&version), 4);
    if (!is || magic != 0x5453434b) throw IoError(path + " is not a checkpoint file");
    if (version != 1) throw IoError(path + " has unsupported checkpoint version");
    auto get_str = [&]() {
      uint64_t n = 0;
      is.read(reinterpret_cast<char*>(&n), 8);
      std::string s(n, '\0');
      is.read(s.data(), static_cast<std::streamsize>(n));
      if (!is) throw IoError("truncated checkpoint " + path);
      return s;
    };
    BlobFile f;
    f.config_json = get_str();
    uint64_t count = 0;
    is.read(reinterpret_cast<char*>(&count), 8);
    for (uint64_t i = 0; i < count; ++i) {
      std::string name = get_str();
      uint32_t ndim = 0;
      is.read(reinterpret_cast<char*>(&ndim), 4);
      Shape shape(ndim);
      for (auto& d : shape) is.read(reinterpret_cast<char*>(&d), 8);
      auto t = TensorData<float>::zeros(shape);
      is.read(reinterpret_cast<char*>(t.data.data()),
              static_cast<std::streamsize>(t.data.size() * sizeof(float)));
      if (!is) throw IoError("truncated checkpoint " + path);
      f.blobs.emplace_back(std::move(name), std::move(t));
    }
    return f;
  }
};

}  // namespace trispeech

#endif  // TRISPEECH_SERIALIZE_HPP
