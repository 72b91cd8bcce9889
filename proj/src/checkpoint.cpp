#include "edit/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <json.hpp>

namespace edit::model {

namespace {

constexpr char kMagic[8] = {'E', 'D', 'I', 'T', 'C', 'K', 'P', 'T'};

void put_u32le(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

std::uint32_t get_u32le(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

nlohmann::json config_json(const DiTConfig& c) {
  return {{"n_blocks", c.n_blocks}, {"dim", c.dim},         {"width_factor", c.width_factor},
          {"router_hidden", c.router_hidden}, {"n_heads", c.n_heads}, {"tokens", c.tokens},
          {"t_max", c.t_max}};
}

}  // namespace

Params round_to_f32(const Params& params) {
  Params out = params;
  for_each_param(out, [](const std::string&, Tensor& t, ParamGroup) {
    for (auto& v : t.data()) v = static_cast<double>(static_cast<float>(v));
  });
  return out;
}

void save_checkpoint(const std::filesystem::path& path, const Params& params, const DiTConfig& cfg) {
  check_shapes(params, cfg);
  nlohmann::json tensors = nlohmann::json::array();
  std::string blob;
  for_each_param(params, [&](const std::string& name, const Tensor& t, ParamGroup) {
    tensors.push_back({{"name", name},
                       {"shape", t.shape()},
                       {"dtype", "f32"},
                       {"offset", blob.size()},
                       {"nbytes", t.size() * 4}});
    for (double v : t.data()) put_u32le(blob, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  });
  const nlohmann::json header = {{"format", "EDITCKPT"}, {"version", 1}, {"config", config_json(cfg)},
                                 {"tensors", tensors}};
  const std::string text = header.dump();

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open checkpoint for writing: " + path.string());
  os.write(kMagic, sizeof(kMagic));
  std::string len;
  const std::uint64_t n = text.size();
  for (int i = 0; i < 8; ++i) len.push_back(static_cast<char>((n >> (8 * i)) & 0xffu));
  os.write(len.data(), 8);
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  os.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  if (!os) throw IoError("failed writing checkpoint: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint: " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, 8) != 0)
    throw IoError("not an EDITCKPT file: " + path.string());
  std::uint64_t hlen = 0;
  for (int i = 0; i < 8; ++i) hlen |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[8 + i])) << (8 * i);
  if (16 + hlen > bytes.size()) throw IoError("truncated checkpoint header: " + path.string());

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(hlen));
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed checkpoint header: " + std::string(e.what()));
  }
  const std::size_t data_start = 16 + hlen;

  Checkpoint ck;
  try {
    const auto& c = header.at("config");
    ck.config.n_blocks = c.at("n_blocks").get<std::size_t>();
    ck.config.dim = c.at("dim").get<std::size_t>();
    ck.config.width_factor = c.at("width_factor").get<std::size_t>();
    ck.config.router_hidden = c.at("router_hidden").get<std::size_t>();
    ck.config.n_heads = c.at("n_heads").get<std::size_t>();
    ck.config.tokens = c.at("tokens").get<std::size_t>();
    ck.config.t_max = c.at("t_max").get<double>();
    ck.config.validate();
    ck.params = zero_params(ck.config);

    const auto& entries = header.at("tensors");
    std::size_t i = 0;
    for_each_param(ck.params, [&](const std::string& name, Tensor& t, ParamGroup) {
      if (i >= entries.size()) throw IoError("checkpoint is missing tensor " + name);
      const auto& e = entries.at(i++);
      if (e.at("name").get<std::string>() != name)
        throw IoError("checkpoint tensor order mismatch at " + name);
      if (e.at("dtype").get<std::string>() != "f32") throw IoError("unsupported dtype for " + name);
      if (e.at("shape").get<Shape>() != t.shape()) throw IoError("shape mismatch for " + name);
      const std::size_t off = e.at("offset").get<std::size_t>();
      if (data_start + off + t.size() * 4 > bytes.size()) throw IoError("truncated data for " + name);
      const auto* p = reinterpret_cast<const unsigned char*>(bytes.data() + data_start + off);
      for (std::size_t k = 0; k < t.size(); ++k)
        t[k] = static_cast<double>(std::bit_cast<float>(get_u32le(p + 4 * k)));
    });
    if (i != entries.size()) throw IoError("checkpoint has unexpected extra tensors");
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed checkpoint header: " + std::string(e.what()));
  } catch (const DomainError& e) {
    throw IoError("invalid checkpoint config: " + std::string(e.what()));
  }
  return ck;
}

}  // namespace edit::model
