#include "tubefield/checkpoint.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace tubefield {

namespace {

constexpr uint16_t kVersion = 1;

nlohmann::json hyper_to_json(const Hyper& h) {
  return {{"d", h.d},
          {"K", h.K},
          {"R", h.R},
          {"C", h.C},
          {"D", h.D},
          {"grid", h.grid},
          {"fourier_bands", h.fourier_bands},
          {"descriptor_r", h.descriptor_r},
          {"tree_classes", h.tree_classes},
          {"segment_classes", h.segment_classes},
          {"fusion", fusion_mode_to_string(h.fusion)}};
}

Hyper hyper_from_json(const nlohmann::json& j) {
  Hyper h;
  h.d = j.at("d");
  h.K = j.at("K");
  h.R = j.at("R");
  h.C = j.at("C");
  h.D = j.at("D");
  h.grid = j.at("grid");
  h.fourier_bands = j.at("fourier_bands");
  h.descriptor_r = j.at("descriptor_r");
  h.tree_classes = j.at("tree_classes");
  h.segment_classes = j.at("segment_classes");
  h.fusion = fusion_mode_from_string(j.at("fusion"));
  return h;
}

} // namespace

void save_checkpoint(const Params<float>& params, const std::string& path) {
  nlohmann::json header;
  header["hyper"] = hyper_to_json(params.hyper);
  nlohmann::json manifest = nlohmann::json::array();
  size_t offset = 0; // in floats from payload start
  auto entries = params.entries();
  for (const auto& [name, arr] : entries) {
    manifest.push_back(
        {{"name", name}, {"shape", arr->shape}, {"offset", offset}});
    offset += arr->numel();
  }
  header["manifest"] = manifest;
  std::string hdr = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_checkpoint: cannot open " + path);
  out.write("TFCK", 4);
  auto put_u16 = [&](uint16_t v) {
    char b[2] = {char(v & 0xff), char(v >> 8)};
    out.write(b, 2);
  };
  auto put_u32 = [&](uint32_t v) {
    char b[4];
    for (int i = 0; i < 4; ++i) b[i] = char((v >> (8 * i)) & 0xff);
    out.write(b, 4);
  };
  put_u16(kVersion);
  put_u32(static_cast<uint32_t>(hdr.size()));
  out.write(hdr.data(), static_cast<std::streamsize>(hdr.size()));
  for (const auto& [name, arr] : entries) {
    static_assert(sizeof(float) == 4);
    out.write(reinterpret_cast<const char*>(arr->data.data()),
              static_cast<std::streamsize>(arr->numel() * 4));
  }
  if (!out) throw std::runtime_error("save_checkpoint: write failed");
}

Params<float> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path);
  std::string bytes((std::istreambuf_iterator<char>(in)),
                    std::istreambuf_iterator<char>());
  if (bytes.size() < 10 || bytes.compare(0, 4, "TFCK") != 0)
    throw std::runtime_error("load_checkpoint: bad magic");
  const unsigned char* p = reinterpret_cast<const unsigned char*>(bytes.data());
  uint16_t version = uint16_t(p[4]) | uint16_t(p[5]) << 8;
  if (version != kVersion)
    throw std::runtime_error("load_checkpoint: unsupported version");
  uint32_t hdr_len = uint32_t(p[6]) | uint32_t(p[7]) << 8 |
                     uint32_t(p[8]) << 16 | uint32_t(p[9]) << 24;
  if (bytes.size() < 10 + size_t(hdr_len))
    throw std::runtime_error("load_checkpoint: truncated header");
  nlohmann::json header = nlohmann::json::parse(bytes.substr(10, hdr_len));

  Params<float> params = Params<float>::init(hyper_from_json(header["hyper"]), 0);
  auto entries = params.entries();
  const size_t payload_off = 10 + hdr_len;
  const auto& manifest = header.at("manifest");
  if (manifest.size() != entries.size())
    throw std::runtime_error("load_checkpoint: manifest size mismatch");
  for (size_t i = 0; i < entries.size(); ++i) {
    const auto& m = manifest[i];
    if (m.at("name") != entries[i].first)
      throw std::runtime_error("load_checkpoint: manifest name mismatch at " +
                               entries[i].first);
    std::vector<size_t> shape = m.at("shape").get<std::vector<size_t>>();
    if (shape != entries[i].second->shape)
      throw std::runtime_error("load_checkpoint: shape mismatch at " +
                               entries[i].first);
    size_t offset = m.at("offset").get<size_t>();
    size_t count = entries[i].second->numel();
    if (payload_off + (offset + count) * 4 > bytes.size())
      throw std::runtime_error("load_checkpoint: truncated payload");
    std::memcpy(entries[i].second->data.data(),
                bytes.data() + payload_off + offset * 4, count * 4);
    for (float v : entries[i].second->data)
      if (!std::isfinite(v))
        throw std::runtime_error("load_checkpoint: non-finite value in " +
                                 entries[i].first);
  }
  return params;
}

} // namespace tubefield
