#pragma once

// Out-of-process generator adapter.
//
// A request is one line of JSON on the service's stdin:
//   {"prompt": "...", "seed": 123}
// The service answers on stdout with a single little-endian frame:
//
//   offset  type           field
//   0       char[4]        magic "FCAT"
//   4       u32            version (1)
//   8       u32 x 2        image height, image width
//   16      u32 x 5        L, H, S_text, p_h, p_w
//   36      u32            word count W
//   40      i32 x L        captured block ids
//   ...     W records      u32 token begin, u32 token end, u32 byte length, UTF-8 bytes
//   ...     u8[h*w*3]      RGB image, row-major
//   ...     f32[L*H*S_text*p_h*p_w]  attention, (layer, head, token, patch) order

#include <cstdint>
#include <string>
#include <vector>

#include "finecount/synthesis.hpp"

namespace finecount {

inline constexpr std::uint32_t kAttentionFrameVersion = 1;

std::vector<std::uint8_t> encode_generation(const Generation& generation);
Generation decode_generation(const std::vector<std::uint8_t>& frame);

std::string encode_generation_request(const std::string& prompt, std::uint64_t seed);

class PipeGenerator : public GeneratorBackend {
 public:
  // argv[0] is resolved through PATH. One process is spawned per request.
  PipeGenerator(std::vector<std::string> argv, GeneratorCapabilities capabilities);

  Generation generate(const std::string& prompt, std::uint64_t seed) override;
  GeneratorCapabilities capabilities() const override { return capabilities_; }

 private:
  std::vector<std::string> argv_;
  GeneratorCapabilities capabilities_;
};

}  // namespace finecount
