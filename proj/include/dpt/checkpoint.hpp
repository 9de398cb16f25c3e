#pragma once

// Checkpoint directory: manifest.json (configuration and tensor table),
// tensors.bin (raw float64 in manifest order) and vocab.txt.

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "dpt/config.hpp"
#include "dpt/data.hpp"
#include "dpt/model.hpp"
#include "json.hpp"

namespace dpt {

inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  ModelConfig model;
  PrefixConfig prefix;
  TrainMode mode = TrainMode::PrefixTune;
  AttentionPlan plan;
  Vocab vocab;
  std::vector<Parameter> tensors;
};

namespace detail {

inline nlohmann::json plan_to_json(const AttentionPlan& p) {
  return {{"design", to_string(p.design)},
          {"enc_segments", p.blocks.enc_segments},
          {"dec_segments", p.blocks.dec_segments},
          {"lower_band", p.blocks.lower_band_layers},
          {"top_p", p.sparsity.top_p},
          {"tau_trunc", p.sparsity.tau_trunc},
          {"tau_soft", p.sparsity.tau_soft},
          {"renormalize_trunc", p.sparsity.renormalize_after_mask},
          {"softsa_variant", to_string(p.sparsity.variant)},
          {"dec_reference_len", p.dec_reference_len}};
}

inline AttentionPlan plan_from_json(const nlohmann::json& j) {
  AttentionPlan p;
  p.design = parse_design(j.at("design").get<std::string>());
  p.blocks.enc_segments = j.at("enc_segments").get<int>();
  p.blocks.dec_segments = j.at("dec_segments").get<int>();
  p.blocks.lower_band_layers = j.at("lower_band").get<int>();
  p.sparsity.top_p = j.at("top_p").get<double>();
  p.sparsity.tau_trunc = j.at("tau_trunc").get<double>();
  p.sparsity.tau_soft = j.at("tau_soft").get<double>();
  p.sparsity.renormalize_after_mask = j.at("renormalize_trunc").get<bool>();
  p.sparsity.variant = parse_soft_variant(j.at("softsa_variant").get<std::string>());
  p.dec_reference_len = j.at("dec_reference_len").get<std::size_t>();
  return p;
}

}  // namespace detail

inline void save_checkpoint(const std::string& dir, const Seq2SeqTransformer& model, TrainMode mode,
                            const AttentionPlan& plan, const Vocab& vocab) {
  namespace fs = std::filesystem;
  static_assert(std::endian::native == std::endian::little, "tensor files are little-endian");
  fs::create_directories(dir);
  const auto& m = model.config();
  const auto& pc = model.prefix_config();
  nlohmann::json manifest;
  manifest["version"] = kCheckpointVersion;
  manifest["model"] = {{"n_layers_enc", m.n_layers_enc}, {"n_layers_dec", m.n_layers_dec}, {"n_heads", m.n_heads},
                       {"d_model", m.d_model},           {"d_ff", m.d_ff},                 {"vocab_size", m.vocab_size},
                       {"max_seq_len", m.max_seq_len}};
  manifest["prefix"] = {{"length", pc.prefix_length}, {"schedule", pc.schedule.str()}, {"init_std", pc.init_std}};
  manifest["mode"] = to_string(mode);
  manifest["plan"] = detail::plan_to_json(plan);
  nlohmann::json table = nlohmann::json::array();
  std::ofstream bin(fs::path(dir) / "tensors.bin", std::ios::binary);
  if (!bin) throw InputError("cannot write checkpoint tensors in " + dir);
  std::size_t offset = 0;
  for (const auto& p : model.parameters()) {
    table.push_back({{"name", p.name}, {"shape", p.value.shape()}, {"role", to_string(p.role)}, {"offset", offset}});
    bin.write(reinterpret_cast<const char*>(p.value.data().data()), static_cast<std::streamsize>(p.value.numel() * sizeof(double)));
    offset += p.value.numel();
  }
  if (!bin) throw InputError("failed writing checkpoint tensors in " + dir);
  manifest["tensors"] = table;
  std::ofstream(fs::path(dir) / "manifest.json") << manifest.dump(2) << '\n';
  vocab.save((fs::path(dir) / "vocab.txt").string());
}

inline Checkpoint read_checkpoint(const std::string& dir) {
  namespace fs = std::filesystem;
  std::ifstream mf(fs::path(dir) / "manifest.json");
  if (!mf) throw InputError("no manifest.json in checkpoint " + dir);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(mf);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("checkpoint manifest: " + std::string(e.what()));
  }
  Checkpoint ck;
  try {
    if (j.at("version").get<int>() != kCheckpointVersion) throw InputError("unsupported checkpoint version");
    const auto& m = j.at("model");
    ck.model = {m.at("n_layers_enc").get<int>(), m.at("n_layers_dec").get<int>(), m.at("n_heads").get<int>(),
                m.at("d_model").get<int>(),      m.at("d_ff").get<int>(),         m.at("vocab_size").get<int>(),
                m.at("max_seq_len").get<int>()};
    const auto& p = j.at("prefix");
    ck.prefix = {p.at("length").get<int>(), ScheduleSpec::parse(p.at("schedule").get<std::string>()),
                 p.at("init_std").get<double>()};
    ck.mode = parse_train_mode(j.at("mode").get<std::string>());
    ck.plan = detail::plan_from_json(j.at("plan"));
    std::ifstream bin(fs::path(dir) / "tensors.bin", std::ios::binary);
    if (!bin) throw InputError("no tensors.bin in checkpoint " + dir);
    std::vector<char> raw((std::istreambuf_iterator<char>(bin)), std::istreambuf_iterator<char>());
    for (const auto& t : j.at("tensors")) {
      Shape shape = t.at("shape").get<Shape>();
      const auto offset = t.at("offset").get<std::size_t>();
      const std::size_t n = shape_numel(shape);
      if ((offset + n) * sizeof(double) > raw.size()) throw InputError("tensors.bin is truncated");
      std::vector<double> values(n);
      std::memcpy(values.data(), raw.data() + offset * sizeof(double), n * sizeof(double));
      const std::string role = t.at("role").get<std::string>();
      if (role != "backbone" && role != "prefix") throw InputError("unknown tensor role '" + role + "'");
      ck.tensors.push_back({t.at("name").get<std::string>(), role == "prefix" ? ParamRole::Prefix : ParamRole::Backbone,
                            Tensor(std::move(shape), std::move(values))});
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("checkpoint manifest: " + std::string(e.what()));
  }
  ck.vocab = Vocab::load((fs::path(dir) / "vocab.txt").string());
  if (ck.vocab.size() != static_cast<std::size_t>(ck.model.vocab_size))
    throw InputError("checkpoint vocabulary has " + std::to_string(ck.vocab.size()) + " tokens, model expects " +
                     std::to_string(ck.model.vocab_size));
  return ck;
}

// Copies tensors into `model` by name. With `backbone_only` prefix tensors in
// the checkpoint are ignored and the model's own prefixes are kept.
inline void assign_parameters(Seq2SeqTransformer& model, const std::vector<Parameter>& tensors, bool backbone_only) {
  std::size_t assigned = 0, expected = 0;
  for (auto& p : model.parameters()) {
    if (backbone_only && p.role == ParamRole::Prefix) continue;
    ++expected;
    const Parameter* src = nullptr;
    for (const auto& t : tensors)
      if (t.name == p.name) src = &t;
    if (src == nullptr) throw InputError("checkpoint lacks tensor " + p.name);
    if (src->value.shape() != p.value.shape())
      throw InputError("checkpoint tensor " + p.name + " has shape " + shape_str(src->value.shape()) + ", model expects " +
                       shape_str(p.value.shape()));
    if (src->role != p.role) throw InputError("checkpoint tensor " + p.name + " has the wrong role");
    std::copy(src->value.data().begin(), src->value.data().end(), p.value.data().begin());
    ++assigned;
  }
  if (assigned != expected) throw InputError("checkpoint does not cover the model");
}

inline Seq2SeqTransformer load_model(const Checkpoint& ck) {
  Seq2SeqTransformer model(ck.model, ck.prefix, 0);
  if (model.parameters().size() != ck.tensors.size()) throw InputError("checkpoint tensor count differs from the model");
  assign_parameters(model, ck.tensors, false);
  return model;
}

}  // namespace dpt
