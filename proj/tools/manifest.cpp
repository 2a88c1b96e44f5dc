#include "manifest.hpp"

#include <fmt/format.h>
#include <openssl/evp.h>

#include <array>
#include <fstream>
#include <memory>

#include "vqg/corpus.hpp"
#include "vqg/error.hpp"

namespace vqg::tools {

std::string sha256_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(fmt::format("cannot open {} for hashing", path.string()));
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1) throw Error("sha256 init failed");
  std::array<char, 1 << 16> buf{};
  while (in) {
    in.read(buf.data(), buf.size());
    if (in.gcount() > 0) EVP_DigestUpdate(ctx.get(), buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  std::array<unsigned char, EVP_MAX_MD_SIZE> digest{};
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx.get(), digest.data(), &len);
  std::string hex;
  for (unsigned int i = 0; i < len; ++i) hex += fmt::format("{:02x}", digest[i]);
  return hex;
}

std::filesystem::path manifest_path_for(const std::filesystem::path& output) {
  auto p = output;
  p += ".manifest.json";
  return p;
}

void write_manifest(const std::filesystem::path& path, const RunManifest& manifest) {
  nlohmann::json inputs = nlohmann::json::array();
  for (const auto& in : manifest.inputs) {
    inputs.push_back({{"path", in.string()}, {"sha256", sha256_file(in)}});
  }
  const nlohmann::json j = {{"command", manifest.command},
                            {"flags", manifest.flags},
                            {"inputs", std::move(inputs)},
                            {"tool_version", kToolVersion},
                            {"duration_seconds", manifest.duration_seconds}};
  write_file_atomically(path, j.dump(2) + "\n");
}

}  // namespace vqg::tools
