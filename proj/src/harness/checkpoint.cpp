#include "rlar/harness/checkpoint.hpp"

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>

#include "rlar/errors.hpp"

namespace rlar::harness {
namespace {

constexpr std::string_view kMagic = "RLARCKPT1";

template <class T>
void put(std::ostream& out, T value) {
    static_assert(std::is_unsigned_v<T>);
    std::array<char, sizeof(T)> bytes{};
    for (std::size_t i = 0; i < sizeof(T); ++i) bytes[i] = static_cast<char>((value >> (8 * i)) & 0xFF);
    out.write(bytes.data(), bytes.size());
}

class Reader {
public:
    Reader(std::istream& in, std::string path) : in_(in), path_(std::move(path)) {}

    template <class T>
    T get(const char* what) {
        std::array<unsigned char, sizeof(T)> bytes{};
        read(bytes.data(), bytes.size(), what);
        T value = 0;
        for (std::size_t i = 0; i < sizeof(T); ++i) value |= static_cast<T>(static_cast<T>(bytes[i]) << (8 * i));
        return value;
    }

    void read(void* dst, std::size_t n, const char* what) {
        in_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
        if (in_.gcount() != static_cast<std::streamsize>(n))
            throw ValidationError(path_ + ": truncated checkpoint while reading " + what);
    }

private:
    std::istream& in_;
    std::string path_;
};

}  // namespace

ad::Tensor round_to_float(const ad::Tensor& t) {
    std::vector<double> v(t.values().begin(), t.values().end());
    for (double& x : v) x = static_cast<double>(static_cast<float>(x));
    return ad::Tensor(t.shape(), std::move(v));
}

void write_checkpoint(const std::filesystem::path& path, const std::vector<NamedArray>& arrays) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ValidationError("cannot write " + path.string());
    out.write(kMagic.data(), static_cast<std::streamsize>(kMagic.size()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(arrays.size()));
    for (const auto& [name, value] : arrays) {
        if (name.size() > std::numeric_limits<std::uint16_t>::max()) throw ValidationError("checkpoint: name too long");
        put<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
        out.write(name.data(), static_cast<std::streamsize>(name.size()));
        put<std::uint8_t>(out, static_cast<std::uint8_t>(value.rank()));
        for (std::size_t d : value.shape()) put<std::uint32_t>(out, static_cast<std::uint32_t>(d));
        for (double x : value.values()) put<std::uint32_t>(out, std::bit_cast<std::uint32_t>(static_cast<float>(x)));
    }
    if (!out) throw ValidationError("failed writing " + path.string());
}

std::vector<NamedArray> read_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot open checkpoint " + path.string());
    Reader r(in, path.string());
    std::array<char, kMagic.size()> magic{};
    r.read(magic.data(), magic.size(), "magic");
    if (std::string_view(magic.data(), magic.size()) != kMagic)
        throw ValidationError(path.string() + ": bad checkpoint magic");
    const auto count = r.get<std::uint32_t>("array count");
    std::vector<NamedArray> arrays;
    for (std::uint32_t a = 0; a < count; ++a) {
        const auto len = r.get<std::uint16_t>("name length");
        std::string name(len, '\0');
        r.read(name.data(), len, "name");
        const auto rank = r.get<std::uint8_t>("rank");
        ad::Shape shape;
        for (std::uint8_t d = 0; d < rank; ++d) shape.push_back(r.get<std::uint32_t>("dims"));
        std::vector<double> values(ad::numel(shape));
        for (double& v : values) v = static_cast<double>(std::bit_cast<float>(r.get<std::uint32_t>("payload")));
        arrays.push_back({std::move(name), ad::Tensor(std::move(shape), std::move(values))});
    }
    if (in.peek() != std::char_traits<char>::eof()) throw ValidationError(path.string() + ": trailing bytes after checkpoint");
    return arrays;
}

}  // namespace rlar::harness
