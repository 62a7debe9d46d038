#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "freqcoda/model.hpp"
#include "freqcoda/tensor.hpp"

// Little-endian binary formats.
//
// FQT0 tensor file:  "FQT0" | u32 rank | u32 dims[rank] | f32 payload
// FQCK checkpoint:   "FQCK" | u32 version | u32 count |
//                    count x (u16 name_len | name | u8 dtype | u8 rank |
//                             u32 dims[rank] | f32 payload)
namespace freqcoda::io {

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::uint8_t kDtypeF32 = 0;

void write_tensor(const std::filesystem::path& path, const Tensor& tensor);
Tensor read_tensor(const std::filesystem::path& path);

std::string encode_tensor(const Tensor& tensor);
Tensor decode_tensor(const std::string& bytes);

void write_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> read_checkpoint(const std::filesystem::path& path);

std::string encode_checkpoint(const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> decode_checkpoint(const std::string& bytes);

// Writes to a sibling temporary file, then renames over the target.
void write_file_atomic(const std::filesystem::path& path, const std::string& bytes);
std::string read_file(const std::filesystem::path& path);

}  // namespace freqcoda::io
