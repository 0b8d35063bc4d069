// Checkpoint directory:
//   model.cfg    flat config snapshot (model.* keys)
//   weights.idx  one line per parameter: name offset shape (offset in doubles)
//   weights.bin  all parameter values, little-endian f64, in store order
#pragma once

#include <filesystem>
#include <sstream>
#include <string>

#include "moon/config.hpp"
#include "moon/model.hpp"
#include "moon/nn.hpp"
#include "moon/volume.hpp"

namespace moon {

inline std::string weights_index(const ParameterStore& store) {
  std::string out;
  std::size_t offset = 0;
  for (const auto& e : store.entries()) {
    out += e.name + " " + std::to_string(offset);
    for (std::size_t i = 0; i < e.tensor.rank(); ++i) out += (i ? "x" : " ") + std::to_string(e.tensor.dim(i));
    out += "\n";
    offset += e.tensor.size();
  }
  return out;
}

inline std::string weights_blob(const ParameterStore& store) {
  std::string out;
  out.reserve(store.scalar_count() * 8);
  for (const auto& e : store.entries())
    for (double v : e.tensor.values()) detail::put_le(out, v);
  return out;
}

inline void save_checkpoint(const std::string& dir, const MoonModel& model) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create checkpoint directory " + dir + ": " + ec.message());
  const std::filesystem::path p(dir);
  detail::write_file((p / "model.cfg").string(), model.config().to_config().to_text());
  detail::write_file((p / "weights.idx").string(), weights_index(model.params()));
  detail::write_file((p / "weights.bin").string(), weights_blob(model.params()));
}

// Overwrites the store's values from an index + blob pair. Names, order and
// shapes must match exactly.
inline void load_weights(ParameterStore& store, const std::string& index, const std::string& blob,
                         const std::string& where) {
  std::istringstream lines(index);
  std::string line;
  std::size_t i = 0, total = 0;
  auto& entries = store.entries();
  const std::string blob_name = where + "/weights.bin";
  while (std::getline(lines, line)) {
    if (line.empty()) continue;
    std::istringstream f(line);
    std::string name, shape;
    std::size_t offset = 0;
    if (!(f >> name >> offset >> shape)) throw IoError(where + ": malformed weights.idx line '" + line + "'");
    if (i >= entries.size() || entries[i].name != name)
      throw IoError(where + ": unexpected parameter '" + name + "' at position " + std::to_string(i));
    auto& t = entries[i].tensor;
    std::string want;
    for (std::size_t a = 0; a < t.rank(); ++a) want += (a ? "x" : "") + std::to_string(t.dim(a));
    if (shape != want) throw IoError(where + ": parameter '" + name + "' has shape " + shape + ", model expects " + want);
    if (offset != total) throw IoError(where + ": parameter '" + name + "' offset mismatch");
    std::size_t pos = offset * 8;
    for (auto& v : t.mutable_values()) v = detail::get_le<double>(blob, pos, blob_name);
    total += t.size();
    ++i;
  }
  if (i != entries.size()) throw IoError(where + ": checkpoint has " + std::to_string(i) + " parameters, model has " +
                                         std::to_string(entries.size()));
  if (total * 8 != blob.size()) throw IoError(where + ": weights.bin has trailing bytes");
}

inline MoonModel load_checkpoint(const std::string& dir) {
  const std::filesystem::path p(dir);
  const auto cfg = ModelConfig::from_config(FlatConfig::load((p / "model.cfg").string()));
  MoonModel model(cfg, 0);
  load_weights(model.params(), detail::read_file((p / "weights.idx").string()),
               detail::read_file((p / "weights.bin").string()), dir);
  return model;
}

}  // namespace moon
