#pragma once

#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "gazekit/common.hpp"

namespace gazekit {

// Archive container used for model checkpoints and backbone weight files.
//
//   bytes 0..3   magic "GZKT"
//   bytes 4..7   format version (uint32 LE), currently 1
//   bytes 8..15  length of the metadata JSON (uint64 LE)
//   ...          metadata JSON (UTF-8)
//   ...          array payloads, concatenated in index order
//
// The metadata JSON has a free-form "meta" object plus an "arrays" list of
// {name, rows, cols, dtype} entries (dtype: "f32" or "f64"); payloads are
// row-major little-endian.

class Archive {
 public:
  nlohmann::json meta = nlohmann::json::object();

  template <class S>
  void add(const std::string& name, const Mat<S>& m) {
    if (index_.count(name)) throw IoError("archive: duplicate array " + name);
    Entry e;
    e.rows = m.rows();
    e.cols = m.cols();
    e.is_double = std::is_same_v<S, double>;
    e.data.resize(static_cast<size_t>(m.size()) * (e.is_double ? 8 : 4));
    if constexpr (std::is_same_v<S, double>) {
      std::memcpy(e.data.data(), m.data(), e.data.size());
    } else {
      std::memcpy(e.data.data(), m.data(), e.data.size());
    }
    index_[name] = entries_.size();
    names_.push_back(name);
    entries_.push_back(std::move(e));
  }

  bool has(const std::string& name) const { return index_.count(name) > 0; }

  const std::vector<std::string>& names() const { return names_; }

  template <class S>
  Mat<S> get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw IoError("archive: missing array " + name);
    const Entry& e = entries_[it->second];
    Mat<S> m(e.rows, e.cols);
    if (e.is_double) {
      const double* src = reinterpret_cast<const double*>(e.data.data());
      for (Index i = 0; i < m.size(); ++i)
        m.data()[i] = static_cast<S>(src[i]);
    } else {
      const float* src = reinterpret_cast<const float*>(e.data.data());
      for (Index i = 0; i < m.size(); ++i)
        m.data()[i] = static_cast<S>(src[i]);
    }
    return m;
  }

  void save(const std::string& path) const {
    nlohmann::json root;
    root["meta"] = meta;
    auto arr = nlohmann::json::array();
    for (size_t k = 0; k < entries_.size(); ++k) {
      arr.push_back({{"name", names_[k]},
                     {"rows", entries_[k].rows},
                     {"cols", entries_[k].cols},
                     {"dtype", entries_[k].is_double ? "f64" : "f32"}});
    }
    root["arrays"] = arr;
    std::string js = root.dump();
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot write " + path);
    f.write("GZKT", 4);
    std::uint32_t ver = 1;
    f.write(reinterpret_cast<const char*>(&ver), 4);
    std::uint64_t len = js.size();
    f.write(reinterpret_cast<const char*>(&len), 8);
    f.write(js.data(), static_cast<std::streamsize>(js.size()));
    for (const auto& e : entries_)
      f.write(reinterpret_cast<const char*>(e.data.data()),
              static_cast<std::streamsize>(e.data.size()));
    if (!f) throw IoError("write failed: " + path);
  }

  static Archive load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path);
    char magic[4];
    f.read(magic, 4);
    if (!f || std::memcmp(magic, "GZKT", 4) != 0)
      throw ParseError("not an archive file: " + path);
    std::uint32_t ver = 0;
    f.read(reinterpret_cast<char*>(&ver), 4);
    if (ver != 1)
      throw ParseError("unsupported archive version " + std::to_string(ver));
    std::uint64_t len = 0;
    f.read(reinterpret_cast<char*>(&len), 8);
    std::string js(len, '\0');
    f.read(js.data(), static_cast<std::streamsize>(len));
    if (!f) throw ParseError("truncated archive header: " + path);
    nlohmann::json root;
    try {
      root = nlohmann::json::parse(js);
    } catch (const std::exception& e) {
      throw ParseError("archive metadata: " + std::string(e.what()));
    }
    Archive a;
    a.meta = root.value("meta", nlohmann::json::object());
    for (const auto& item : root["arrays"]) {
      Entry e;
      e.rows = item.at("rows").get<Index>();
      e.cols = item.at("cols").get<Index>();
      e.is_double = item.at("dtype").get<std::string>() == "f64";
      e.data.resize(static_cast<size_t>(e.rows) * e.cols *
                    (e.is_double ? 8 : 4));
      f.read(reinterpret_cast<char*>(e.data.data()),
             static_cast<std::streamsize>(e.data.size()));
      if (!f) throw ParseError("truncated archive payload: " + path);
      std::string name = item.at("name").get<std::string>();
      a.index_[name] = a.entries_.size();
      a.names_.push_back(name);
      a.entries_.push_back(std::move(e));
    }
    return a;
  }

 private:
  struct Entry {
    Index rows = 0, cols = 0;
    bool is_double = false;
    std::vector<unsigned char> data;
  };
  std::vector<std::string> names_;
  std::vector<Entry> entries_;
  std::map<std::string, size_t> index_;
};

}  // namespace gazekit
