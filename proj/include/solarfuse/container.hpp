#pragma once

// Tensor container files:
//   8 bytes   magic "FSTN0001"
//   8 bytes   little-endian uint64 header length L
//   L bytes   UTF-8 JSON {"dtype":"f64","name":...,"shape":[...]}
//   payload   little-endian float64, row-major

#include <filesystem>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

#include "solarfuse/tensor.hpp"

namespace solarfuse {

inline constexpr char kContainerMagic[9] = "FSTN0001";

class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct NamedTensor {
    std::string name;
    Tensor tensor;
};

void write_tensor(std::ostream& os, const Tensor& t, const std::string& name);
NamedTensor read_tensor(std::istream& is);

void save_tensor(const std::filesystem::path& path, const Tensor& t, const std::string& name);
NamedTensor load_tensor(const std::filesystem::path& path);

// A file may hold several records back to back.
void save_tensors(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> load_tensors(const std::filesystem::path& path);

}  // namespace solarfuse
