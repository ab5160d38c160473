#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "sbss/common.hpp"
#include "sbss/grid.hpp"

namespace sbss {

// --- .tns: little-endian tensor container ------------------------------------
// magic "TNS1" | u8 dtype (1 = f32) | u8 rank | rank x u32 dims | row-major payload

struct TnsTensor {
    std::vector<uint32_t> dims;
    std::vector<float> data;

    size_t element_count() const {
        size_t n = 1;
        for (uint32_t d : dims) n *= d;
        return n;
    }
};

namespace detail {

inline void put_u32le(std::ostream& os, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline uint32_t get_u32le(std::istream& is, const std::string& what) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) throw CorruptInputError(what + ": truncated header");
    return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
           (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

inline void put_f32le(std::ostream& os, const float* v, size_t n) {
    // x86 is little-endian; write directly but keep the helper as the one place
    // that would need a byte swap elsewhere.
    static_assert(sizeof(float) == 4);
    os.write(reinterpret_cast<const char*>(v), static_cast<std::streamsize>(n * 4));
}

inline void get_f32le(std::istream& is, float* v, size_t n, const std::string& what) {
    if (!is.read(reinterpret_cast<char*>(v), static_cast<std::streamsize>(n * 4)))
        throw CorruptInputError(what + ": truncated payload");
}

}  // namespace detail

inline void write_tns(std::ostream& os, const TnsTensor& t) {
    os.write("TNS1", 4);
    os.put(static_cast<char>(1));  // dtype f32
    os.put(static_cast<char>(t.dims.size()));
    for (uint32_t d : t.dims) detail::put_u32le(os, d);
    if (t.data.size() != t.element_count())
        throw std::invalid_argument("write_tns: payload does not match dims");
    detail::put_f32le(os, t.data.data(), t.data.size());
}

inline TnsTensor read_tns(std::istream& is, const std::string& what) {
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, "TNS1", 4) != 0)
        throw CorruptInputError(what + ": bad .tns magic");
    int dtype = is.get();
    int rank = is.get();
    if (dtype != 1) throw CorruptInputError(what + ": unsupported dtype code");
    if (rank < 0 || rank > 8) throw CorruptInputError(what + ": bad rank");
    TnsTensor t;
    t.dims.resize(rank);
    for (int i = 0; i < rank; ++i) t.dims[i] = detail::get_u32le(is, what);
    t.data.resize(t.element_count());
    detail::get_f32le(is, t.data.data(), t.data.size(), what);
    return t;
}

inline void write_tns_file(const std::string& path, const TnsTensor& t) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open for write: " + path);
    write_tns(os, t);
    if (!os) throw std::runtime_error("write failed: " + path);
}

inline TnsTensor read_tns_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw NotFoundError("cannot open: " + path);
    return read_tns(is, path);
}

inline TnsTensor probmap_to_tns(const ProbMap& m) {
    TnsTensor t;
    t.dims = {static_cast<uint32_t>(m.channels), static_cast<uint32_t>(m.height),
              static_cast<uint32_t>(m.width)};
    t.data = m.values;
    return t;
}

inline ProbMap tns_to_probmap(const TnsTensor& t, const std::string& what) {
    if (t.dims.size() != 3) throw CorruptInputError(what + ": expected rank-3 tensor");
    ProbMap m(static_cast<int>(t.dims[0]), static_cast<int>(t.dims[1]), static_cast<int>(t.dims[2]));
    m.values = t.data;
    return m;
}

// --- PPM (P6) / PGM (P5), binary, maxval 255 ----------------------------------

inline void write_ppm(const std::string& path, const RgbImage& img) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open for write: " + path);
    os << "P6\n" << img.width << " " << img.height << "\n255\n";
    os.write(reinterpret_cast<const char*>(img.samples.data()),
             static_cast<std::streamsize>(img.samples.size()));
    if (!os) throw std::runtime_error("write failed: " + path);
}

inline void write_pgm(const std::string& path, const LabelMap& m) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open for write: " + path);
    os << "P5\n" << m.width << " " << m.height << "\n255\n";
    os.write(reinterpret_cast<const char*>(m.labels.data()),
             static_cast<std::streamsize>(m.labels.size()));
    if (!os) throw std::runtime_error("write failed: " + path);
}

namespace detail {

inline int pnm_token(std::istream& is, const std::string& what) {
    // skips whitespace and '#' comments
    int c = is.get();
    while (c == '#' || std::isspace(c)) {
        if (c == '#')
            while (c != '\n' && c != EOF) c = is.get();
        c = is.get();
    }
    int v = 0;
    bool any = false;
    while (c >= '0' && c <= '9') {
        v = v * 10 + (c - '0');
        any = true;
        c = is.get();
    }
    if (!any) throw CorruptInputError(what + ": malformed PNM header");
    return v;
}

}  // namespace detail

inline RgbImage read_ppm(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw NotFoundError("cannot open: " + path);
    char m0 = static_cast<char>(is.get()), m1 = static_cast<char>(is.get());
    if (m0 != 'P' || m1 != '6') throw CorruptInputError(path + ": not a P6 PPM");
    int w = detail::pnm_token(is, path);
    int h = detail::pnm_token(is, path);
    int maxval = detail::pnm_token(is, path);
    if (maxval != 255) throw CorruptInputError(path + ": unsupported maxval");
    RgbImage img(h, w);
    if (!is.read(reinterpret_cast<char*>(img.samples.data()),
                 static_cast<std::streamsize>(img.samples.size())))
        throw CorruptInputError(path + ": truncated pixel data");
    return img;
}

inline LabelMap read_pgm(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw NotFoundError("cannot open: " + path);
    char m0 = static_cast<char>(is.get()), m1 = static_cast<char>(is.get());
    if (m0 != 'P' || m1 != '5') throw CorruptInputError(path + ": not a P5 PGM");
    int w = detail::pnm_token(is, path);
    int h = detail::pnm_token(is, path);
    int maxval = detail::pnm_token(is, path);
    if (maxval != 255) throw CorruptInputError(path + ": unsupported maxval");
    LabelMap m(h, w);
    if (!is.read(reinterpret_cast<char*>(m.labels.data()),
                 static_cast<std::streamsize>(m.labels.size())))
        throw CorruptInputError(path + ": truncated pixel data");
    return m;
}

}  // namespace sbss
