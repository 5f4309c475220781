#include "solarfuse/container.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "json.hpp"

namespace solarfuse {
namespace {

static_assert(sizeof(double) == 8);

template <class T>
T to_little(T v) {
    if constexpr (std::endian::native == std::endian::big) {
        unsigned char b[sizeof(T)];
        std::memcpy(b, &v, sizeof(T));
        for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(b[i], b[sizeof(T) - 1 - i]);
        std::memcpy(&v, b, sizeof(T));
    }
    return v;
}

}  // namespace

void write_tensor(std::ostream& os, const Tensor& t, const std::string& name) {
    nlohmann::json header;
    header["shape"] = t.shape();
    header["dtype"] = "f64";
    header["name"] = name;
    const std::string text = header.dump();
    os.write(kContainerMagic, 8);
    const std::uint64_t len = to_little<std::uint64_t>(text.size());
    os.write(reinterpret_cast<const char*>(&len), 8);
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    if constexpr (std::endian::native == std::endian::little) {
        os.write(reinterpret_cast<const char*>(t.data().data()), static_cast<std::streamsize>(t.numel() * 8));
    } else {
        for (double v : t.data()) {
            const double le = to_little(v);
            os.write(reinterpret_cast<const char*>(&le), 8);
        }
    }
    if (!os) throw FormatError("failed writing tensor '" + name + "'");
}

NamedTensor read_tensor(std::istream& is) {
    char magic[8];
    if (!is.read(magic, 8) || std::memcmp(magic, kContainerMagic, 8) != 0)
        throw FormatError("bad tensor container magic (expected FSTN0001)");
    std::uint64_t len = 0;
    if (!is.read(reinterpret_cast<char*>(&len), 8)) throw FormatError("truncated tensor container header length");
    len = to_little(len);
    if (len > (1u << 24)) throw FormatError("tensor container header too large");
    std::string text(len, '\0');
    if (!is.read(text.data(), static_cast<std::streamsize>(len))) throw FormatError("truncated tensor container header");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("invalid tensor container header: ") + e.what());
    }
    if (header.value("dtype", "") != "f64") throw FormatError("unsupported tensor dtype in container");
    Shape shape = header.at("shape").get<Shape>();
    std::vector<double> data(shape_numel(shape));
    if (!is.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * 8)))
        throw FormatError("truncated tensor container payload");
    for (double& v : data) v = to_little(v);
    NamedTensor out;
    out.name = header.value("name", "");
    out.tensor = Tensor::from(std::move(shape), std::move(data));
    out.tensor.set_name(out.name);
    return out;
}

void save_tensor(const std::filesystem::path& path, const Tensor& t, const std::string& name) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw FormatError("cannot open " + path.string() + " for writing");
    write_tensor(os, t, name);
}

NamedTensor load_tensor(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open " + path.string());
    try {
        return read_tensor(is);
    } catch (const FormatError& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

void save_tensors(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw FormatError("cannot open " + path.string() + " for writing");
    for (const auto& nt : tensors) write_tensor(os, nt.tensor, nt.name);
}

std::vector<NamedTensor> load_tensors(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open " + path.string());
    std::vector<NamedTensor> out;
    try {
        while (is.peek() != std::char_traits<char>::eof()) out.push_back(read_tensor(is));
    } catch (const FormatError& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
    return out;
}

}  // namespace solarfuse
