#pragma once

// Versioned JSON container for NBOW models. Doubles are written in shortest
// round-trip form, so save -> load reproduces every parameter bit-exactly.

#include <fstream>
#include <istream>
#include <ostream>
#include <string>

#include <json.hpp>

#include "convsafe/error.hpp"
#include "convsafe/nbow/model.hpp"

namespace convsafe::nbow {

inline constexpr const char* kCheckpointFormat = "convsafe-nbow";
inline constexpr int kCheckpointVersion = 1;

inline nlohmann::json to_json(const NbowModel& m) {
  using nlohmann::json;
  json layers = json::array();
  for (const auto& l : m.mlp.layers)
    layers.push_back({{"rows", l.w.rows}, {"cols", l.w.cols}, {"w", l.w.data}, {"b", l.b}});
  std::vector<std::string> vocab(m.embeddings.tokens().begin() + 1, m.embeddings.tokens().end());
  json j = {{"format", kCheckpointFormat},
            {"version", kCheckpointVersion},
            {"task", to_string(m.task)},
            {"dim", m.embeddings.dim()},
            {"classes", m.n_classes()},
            {"weighted_pooling", m.weighted_pooling},
            {"vocab", vocab},
            {"embeddings", m.embeddings.vectors.data},
            {"layers", std::move(layers)}};
  if (m.weighted_pooling) j["token_weights"] = m.token_weights;
  return j;
}

inline NbowModel model_from_json(const nlohmann::json& j) {
  try {
    if (j.at("format") != kCheckpointFormat) throw SchemaError("not an NBOW checkpoint");
    if (j.at("version").get<int>() != kCheckpointVersion)
      throw SchemaError("unsupported checkpoint version " + j.at("version").dump());
    NbowModel m;
    m.task = task_from_string(j.at("task").get<std::string>());
    const auto dim = j.at("dim").get<std::size_t>();
    m.embeddings.reset(j.at("vocab").get<std::vector<std::string>>(), dim);
    auto emb = j.at("embeddings").get<std::vector<double>>();
    if (emb.size() != m.embeddings.vectors.data.size())
      throw DimensionMismatch(m.embeddings.vectors.data.size(), emb.size());
    m.embeddings.vectors.data = std::move(emb);
    m.weighted_pooling = j.at("weighted_pooling").get<bool>();
    if (m.weighted_pooling) {
      m.token_weights = j.at("token_weights").get<std::vector<double>>();
      if (m.token_weights.size() != m.embeddings.size())
        throw DimensionMismatch(m.embeddings.size(), m.token_weights.size());
    }
    const auto& layers = j.at("layers");
    if (!layers.is_array() || layers.size() != 3) throw SchemaError("checkpoint must have 3 layers");
    for (std::size_t l = 0; l < 3; ++l) {
      auto& d = m.mlp.layers[l];
      d.w.rows = layers[l].at("rows").get<std::size_t>();
      d.w.cols = layers[l].at("cols").get<std::size_t>();
      d.w.data = layers[l].at("w").get<std::vector<double>>();
      d.b = layers[l].at("b").get<std::vector<double>>();
      if (d.w.data.size() != d.w.rows * d.w.cols) throw DimensionMismatch(d.w.rows * d.w.cols, d.w.data.size());
    }
    m.mlp.check_chain();
    const std::size_t in = m.task == Task::Offensive ? dim : 4 * dim;
    if (m.mlp.input_dim() != in) throw DimensionMismatch(in, m.mlp.input_dim());
    if (m.n_classes() != num_classes(m.task)) throw DimensionMismatch(num_classes(m.task), m.n_classes());
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("malformed checkpoint: ") + e.what());
  }
}

inline void save_model(const NbowModel& m, std::ostream& out) { out << to_json(m).dump() << '\n'; }

inline void save_model(const NbowModel& m, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint " + path);
  save_model(m, out);
}

inline NbowModel load_model(std::istream& in) {
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("checkpoint is not valid JSON: ") + e.what());
  }
  return model_from_json(j);
}

inline NbowModel load_model(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path);
  return load_model(in);
}

}  // namespace convsafe::nbow
