#pragma once

#include <string>
#include <string_view>

#include "gilab/tensor.hpp"

namespace gilab {

// Lower-case hex SHA-256.
std::string sha256_hex(std::string_view bytes);
// Digest of shape and little-endian payload.
std::string tensor_digest(const Tensor& t);

}  // namespace gilab
