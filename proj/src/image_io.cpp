#include "advseg/image_io.hpp"

#include <cctype>
#include <fstream>
#include <stdexcept>
#include <string>

namespace advseg {

namespace {

std::size_t read_header_int(std::istream& in, const std::filesystem::path& path) {
    int ch = in.get();
    for (;;) {
        while (ch != EOF && std::isspace(ch)) ch = in.get();
        if (ch == '#') {
            while (ch != EOF && ch != '\n') ch = in.get();
            continue;
        }
        break;
    }
    if (ch == EOF || !std::isdigit(ch)) {
        throw std::runtime_error("malformed PNM header in " + path.string());
    }
    std::size_t v = 0;
    while (ch != EOF && std::isdigit(ch)) {
        v = v * 10 + static_cast<std::size_t>(ch - '0');
        if (v > 1u << 20) throw std::runtime_error("PNM extent too large in " + path.string());
        ch = in.get();
    }
    // Exactly one whitespace byte terminates the field; ch already consumed it.
    if (ch != EOF && !std::isspace(ch)) {
        throw std::runtime_error("malformed PNM header in " + path.string());
    }
    return v;
}

}  // namespace

void write_pnm(const std::filesystem::path& path, const Raster& r) {
    if (r.channels != 1 && r.channels != 3) throw std::invalid_argument("write_pnm: 1 or 3 channels");
    if (r.data.size() != r.height * r.width * r.channels) {
        throw std::invalid_argument("write_pnm: data size mismatch");
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << (r.channels == 3 ? "P6" : "P5") << '\n' << r.width << ' ' << r.height << "\n255\n";
    out.write(reinterpret_cast<const char*>(r.data.data()), static_cast<std::streamsize>(r.data.size()));
    if (!out) throw std::runtime_error("error writing " + path.string());
}

Raster read_pnm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read " + path.string());
    char magic[2];
    if (!in.read(magic, 2) || magic[0] != 'P' || (magic[1] != '5' && magic[1] != '6')) {
        throw std::runtime_error("not a binary PGM/PPM file: " + path.string());
    }
    Raster r;
    r.channels = magic[1] == '6' ? 3 : 1;
    r.width = read_header_int(in, path);
    r.height = read_header_int(in, path);
    const std::size_t maxval = read_header_int(in, path);
    if (r.width == 0 || r.height == 0) throw std::runtime_error("empty image in " + path.string());
    if (maxval != 255) throw std::runtime_error("unsupported maxval in " + path.string());
    r.data.resize(r.height * r.width * r.channels);
    if (!in.read(reinterpret_cast<char*>(r.data.data()), static_cast<std::streamsize>(r.data.size()))) {
        throw std::runtime_error("truncated pixel data in " + path.string());
    }
    return r;
}

}  // namespace advseg
