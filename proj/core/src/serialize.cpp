#include "dare/serialize.hpp"

#include <string>

namespace dare {

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"layers", c.layers},   {"heads", c.heads},         {"d_model", c.d_model},
                     {"d_int", c.d_int},     {"n_vocab", c.n_vocab},     {"block_len", c.block_len},
                     {"activation", std::string(to_string(c.activation))}, {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  // Missing keys keep their defaults so hand-written configs can be partial.
  ModelConfig out = c;
  if (j.contains("layers")) j.at("layers").get_to(out.layers);
  if (j.contains("heads")) j.at("heads").get_to(out.heads);
  if (j.contains("d_model")) j.at("d_model").get_to(out.d_model);
  if (j.contains("d_int")) j.at("d_int").get_to(out.d_int);
  if (j.contains("n_vocab")) j.at("n_vocab").get_to(out.n_vocab);
  if (j.contains("block_len")) j.at("block_len").get_to(out.block_len);
  if (j.contains("activation")) out.activation = activation_from_string(j.at("activation").get<std::string>());
  if (j.contains("seed")) j.at("seed").get_to(out.seed);
  c = out;
}

void to_json(nlohmann::json& j, const DriftProfile& p) {
  auto taus = nlohmann::json::array();
  for (const auto& t : p.tau_layer) taus.push_back(t ? nlohmann::json(*t) : nlohmann::json(nullptr));
  j = nlohmann::json{{"phi_bar", p.phi_bar},
                     {"epsilon", p.epsilon},
                     {"s_layer", p.s_layer},
                     {"phi_layer", p.phi_layer},
                     {"tau_layer", std::move(taus)},
                     {"skipped_pairs", p.skipped_pairs},
                     {"clamp_events", p.clamp_events}};
}

void from_json(const nlohmann::json& j, DriftProfile& p) {
  DriftProfile out;
  j.at("phi_bar").get_to(out.phi_bar);
  j.at("epsilon").get_to(out.epsilon);
  j.at("s_layer").get_to(out.s_layer);
  j.at("phi_layer").get_to(out.phi_layer);
  for (const auto& t : j.at("tau_layer")) {
    out.tau_layer.push_back(t.is_null() ? Threshold{} : Threshold{t.get<double>()});
  }
  out.skipped_pairs = j.value("skipped_pairs", std::size_t{0});
  out.clamp_events = j.value("clamp_events", std::size_t{0});
  p = std::move(out);
}

}  // namespace dare
