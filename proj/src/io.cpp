#include "ciuap/io.hpp"

#include "ciuap/errors.hpp"

#include <openssl/evp.h>
#include <png.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <memory>
#include <sstream>

namespace ciuap::io {

std::string sha256_hex(std::span<const char> bytes)
{
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
        throw Error("sha256 digest failed");
    }
    std::ostringstream os;
    for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
    return os.str();
}

std::string sha256_file(const fs::path& path)
{
    const auto bytes = read_bytes(path);
    return sha256_hex(bytes);
}

std::string sha256_text(const std::string& text) { return sha256_hex(std::span<const char>(text.data(), text.size())); }

std::vector<char> read_bytes(const fs::path& path)
{
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DependencyError("missing file " + path.string());
    return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

void write_bytes(const fs::path& path, std::span<const char> bytes)
{
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream f(path, std::ios::binary);
    if (!f) throw Error("cannot write " + path.string());
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

std::string read_text(const fs::path& path)
{
    const auto bytes = read_bytes(path);
    return {bytes.begin(), bytes.end()};
}

void write_text(const fs::path& path, const std::string& text)
{
    write_bytes(path, std::span<const char>(text.data(), text.size()));
}

Json read_json(const fs::path& path)
{
    const auto text = read_text(path);
    try {
        return Json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw DependencyError("malformed JSON in " + path.string() + ": " + e.what());
    }
}

void write_json(const fs::path& path, const Json& j) { write_text(path, j.dump(2) + "\n"); }

void verify_checksum(const fs::path& path, const std::string& expected_sha256)
{
    if (!fs::exists(path)) throw DependencyError("missing file " + path.string());
    const auto got = sha256_file(path);
    if (got != expected_sha256) {
        throw DependencyError("checksum mismatch for " + path.string() + " (expected " + expected_sha256 + ", got " +
                              got + ")");
    }
}

void write_pfm(const fs::path& path, const Tensor& image)
{
    const auto& s = image.shape();
    require(s.n == 1 && (s.c == 1 || s.c == 3), "pfm needs a single 1- or 3-channel sample, got " + s.str());
    std::ostringstream header;
    header << (s.c == 3 ? "PF" : "Pf") << "\n" << s.w << " " << s.h << "\n-1.0\n";
    std::string out = header.str();
    const std::size_t hdr = out.size();
    out.resize(hdr + s.size() * sizeof(float));
    char* dst = out.data() + hdr;
    // Rows are stored bottom to top, channels interleaved, little endian.
    for (int row = s.h - 1; row >= 0; --row) {
        for (int col = 0; col < s.w; ++col) {
            for (int c = 0; c < s.c; ++c) {
                const float v = image.at(0, c, row, col);
                std::memcpy(dst, &v, sizeof(float));
                dst += sizeof(float);
            }
        }
    }
    static_assert(std::endian::native == std::endian::little, "pfm writer assumes a little-endian host");
    write_text(path, out);
}

Tensor read_pfm(const fs::path& path)
{
    const auto bytes = read_bytes(path);
    std::string text(bytes.begin(), bytes.end());
    std::istringstream is(text);
    std::string magic;
    int w = 0;
    int h = 0;
    double scale = 0.0;
    is >> magic >> w >> h >> scale;
    if (!is || (magic != "PF" && magic != "Pf") || w <= 0 || h <= 0 || scale >= 0.0) {
        throw DependencyError("not a little-endian PFM file: " + path.string());
    }
    is.get(); // single whitespace after the scale
    const auto offset = static_cast<std::size_t>(is.tellg());
    const int c = magic == "PF" ? 3 : 1;
    Tensor image(Shape{1, c, h, w});
    if (offset + image.size() * sizeof(float) != bytes.size()) {
        throw DependencyError("PFM payload size mismatch: " + path.string());
    }
    const char* src = bytes.data() + offset;
    for (int row = h - 1; row >= 0; --row) {
        for (int col = 0; col < w; ++col) {
            for (int ch = 0; ch < c; ++ch) {
                float v = 0.0F;
                std::memcpy(&v, src, sizeof(float));
                src += sizeof(float);
                image.at(0, ch, row, col) = v;
            }
        }
    }
    return image;
}

void write_png(const fs::path& path, const Tensor& image, float lo, float hi)
{
    const auto& s = image.shape();
    require(s.n == 1 && (s.c == 1 || s.c == 3), "png needs a single 1- or 3-channel sample, got " + s.str());
    require(hi > lo, "png value range must be non-empty");
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.string().c_str(), "wb"), &std::fclose);
    if (!fp) throw Error("cannot write " + path.string());
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (png == nullptr || info == nullptr || setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw Error("libpng failed writing " + path.string());
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(s.w), static_cast<png_uint_32>(s.h), 8,
                 s.c == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<png_byte> row(static_cast<std::size_t>(s.w) * s.c);
    for (int r = 0; r < s.h; ++r) {
        for (int col = 0; col < s.w; ++col) {
            for (int c = 0; c < s.c; ++c) {
                const float t = (image.at(0, c, r, col) - lo) / (hi - lo) * 255.0F;
                row[static_cast<std::size_t>(col) * s.c + c] =
                    static_cast<png_byte>(std::lround(std::clamp(t, 0.0F, 255.0F)));
            }
        }
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

} // namespace ciuap::io
