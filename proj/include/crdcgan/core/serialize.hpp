#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "crdcgan/core/errors.hpp"
#include "crdcgan/core/nn.hpp"
#include "crdcgan/core/tensor.hpp"

namespace crdcgan {

inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline uint64_t fnv1a64(const std::string& s, uint64_t h = 0xcbf29ce484222325ull) {
  return fnv1a64(s.data(), s.size(), h);
}

inline std::string hash_hex(uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return std::string(buf);
}

// Tagged little binary container: magic, version, then a sequence of
// (kind, name, payload) entries. Kind 'T' = float tensor, 'S' = string,
// 'I' = int64. Not cross-endian portable; checkpoints are per-machine.
class BlobWriter {
 public:
  BlobWriter(const std::string& path, const std::string& magic, uint32_t version) : path_(path) {
    out_.open(path, std::ios::binary);
    if (!out_) throw ArtifactError("cannot open for writing: " + path);
    out_.write(magic.data(), static_cast<std::streamsize>(magic.size()));
    write_raw(&version, sizeof(version));
  }

  void put_string(const std::string& name, const std::string& v) {
    put_header('S', name);
    put_sized(v);
  }

  void put_i64(const std::string& name, int64_t v) {
    put_header('I', name);
    write_raw(&v, sizeof(v));
  }

  void put_tensor(const std::string& name, const Tensor<float>& t) {
    put_header('T', name);
    uint32_t rank = static_cast<uint32_t>(t.rank());
    write_raw(&rank, sizeof(rank));
    for (int i = 0; i < t.rank(); ++i) {
      int32_t d = t.dim(i);
      write_raw(&d, sizeof(d));
    }
    write_raw(t.data(), sizeof(float) * static_cast<size_t>(t.numel()));
  }

  void close() {
    out_.close();
    if (!out_.good()) throw ArtifactError("write failed: " + path_);
  }

 private:
  void put_header(char kind, const std::string& name) {
    write_raw(&kind, 1);
    put_sized(name);
  }
  void put_sized(const std::string& s) {
    uint32_t n = static_cast<uint32_t>(s.size());
    write_raw(&n, sizeof(n));
    out_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }
  void write_raw(const void* p, size_t n) { out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n)); }

  std::string path_;
  std::ofstream out_;
};

class BlobReader {
 public:
  BlobReader(const std::string& path, const std::string& magic, uint32_t expected_version) : path_(path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ArtifactError("cannot open: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    buf_ = ss.str();
    if (buf_.size() < magic.size() + 4 || buf_.compare(0, magic.size(), magic) != 0) {
      throw ArtifactError("not a " + magic + " file: " + path);
    }
    pos_ = magic.size();
    uint32_t version = 0;
    read_raw(&version, sizeof(version));
    if (version != expected_version) {
      throw ArtifactError("unsupported " + magic + " version " + std::to_string(version) + " in " + path);
    }
    // index entries
    while (pos_ < buf_.size()) {
      char kind;
      read_raw(&kind, 1);
      std::string name = get_sized();
      if (kind == 'S') {
        strings_[name] = get_sized();
      } else if (kind == 'I') {
        int64_t v;
        read_raw(&v, sizeof(v));
        ints_[name] = v;
      } else if (kind == 'T') {
        uint32_t rank;
        read_raw(&rank, sizeof(rank));
        std::vector<int> shape(rank);
        for (uint32_t i = 0; i < rank; ++i) {
          int32_t d;
          read_raw(&d, sizeof(d));
          shape[i] = d;
        }
        Tensor<float> t(shape);
        read_raw(t.data(), sizeof(float) * static_cast<size_t>(t.numel()));
        tensors_.emplace(name, std::move(t));
      } else {
        throw ArtifactError("corrupt entry in " + path);
      }
    }
  }

  const std::string& get_string(const std::string& name) const {
    auto it = strings_.find(name);
    if (it == strings_.end()) throw ArtifactError("missing field '" + name + "' in " + path_);
    return it->second;
  }

  int64_t get_i64(const std::string& name) const {
    auto it = ints_.find(name);
    if (it == ints_.end()) throw ArtifactError("missing field '" + name + "' in " + path_);
    return it->second;
  }

  const Tensor<float>& get_tensor(const std::string& name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw ArtifactError("missing tensor '" + name + "' in " + path_);
    return it->second;
  }

  bool has(const std::string& name) const {
    return strings_.count(name) || ints_.count(name) || tensors_.count(name);
  }

 private:
  void read_raw(void* p, size_t n) {
    if (pos_ + n > buf_.size()) throw ArtifactError("truncated file: " + path_);
    std::memcpy(p, buf_.data() + pos_, n);
    pos_ += n;
  }
  std::string get_sized() {
    uint32_t n;
    read_raw(&n, sizeof(n));
    if (pos_ + n > buf_.size()) throw ArtifactError("truncated file: " + path_);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  std::string path_;
  std::string buf_;
  size_t pos_ = 0;
  std::map<std::string, std::string> strings_;
  std::map<std::string, int64_t> ints_;
  std::map<std::string, Tensor<float>> tensors_;
};

inline void put_store(BlobWriter& w, const std::string& prefix, const ParamStore<float>& ps) {
  w.put_i64(prefix + ".count", ps.count());
  for (int i = 0; i < ps.count(); ++i) w.put_tensor(prefix + "." + ps.name(i), ps.value(i));
}

inline void get_store(const BlobReader& r, const std::string& prefix, ParamStore<float>& ps) {
  if (r.get_i64(prefix + ".count") != ps.count()) {
    throw ArtifactError("parameter count mismatch for " + prefix);
  }
  for (int i = 0; i < ps.count(); ++i) {
    const Tensor<float>& t = r.get_tensor(prefix + "." + ps.name(i));
    if (t.shape() != ps.value(i).shape()) {
      throw ArtifactError("parameter shape mismatch: " + ps.name(i));
    }
    ps.value(i) = t;
  }
}

// Hash over all parameter bytes, stable across runs on the same machine.
inline uint64_t hash_store(const ParamStore<float>& ps) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (int i = 0; i < ps.count(); ++i) {
    h = fnv1a64(ps.name(i), h);
    h = fnv1a64(ps.value(i).data(), sizeof(float) * static_cast<size_t>(ps.value(i).numel()), h);
  }
  return h;
}

}  // namespace crdcgan
