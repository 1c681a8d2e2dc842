#include "anonydiff/image.hpp"

#include "anonydiff/hashing.hpp"

#include <png.h>

#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

namespace anonydiff {

static_assert(std::endian::native == std::endian::little, "flat image format assumes a little-endian host");

void write_image_bin(const std::filesystem::path& path, const Image& img) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out << "IMG v1 " << img.height << ' ' << img.width << ' ' << img.channels << '\n';
    out.write(reinterpret_cast<const char*>(img.pixels.data()),
              static_cast<std::streamsize>(img.pixels.size() * sizeof(float)));
    if (!out) throw IoError("write failed: " + path.string());
}

Image read_image_bin(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::string header;
    std::getline(in, header);
    std::istringstream hs(header);
    std::string magic, version;
    int h = 0, w = 0, c = 0;
    hs >> magic >> version >> h >> w >> c;
    if (magic != "IMG" || version != "v1" || h <= 0 || w <= 0 || c <= 0)
        throw IoError("bad image header in " + path.string() + ": '" + header + "'");
    Image img(h, w, c);
    in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size() * sizeof(float)));
    if (in.gcount() != static_cast<std::streamsize>(img.pixels.size() * sizeof(float)))
        throw IoError("truncated image payload in " + path.string());
    return img;
}

std::uint8_t to_byte(float v) {
    const double scaled = (std::clamp(static_cast<double>(v), -1.0, 1.0) + 1.0) * 127.5;
    return static_cast<std::uint8_t>(std::nearbyint(scaled));  // default rounding mode: half to even
}

void write_png(const std::filesystem::path& path, const Image& img) {
    if (img.channels != 3) throw IoError("write_png: expected 3 channels");
    FILE* fp = std::fopen(path.string().c_str(), "wb");
    if (!fp) throw IoError("cannot open " + path.string() + " for writing");
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info || setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        std::fclose(fp);
        throw IoError("libpng failure writing " + path.string());
    }
    png_init_io(png, fp);
    png_set_IHDR(png, info, img.width, img.height, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<png_byte> row(static_cast<std::size_t>(img.width) * 3);
    for (int y = 0; y < img.height; ++y) {
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < 3; ++c) row[x * 3 + c] = to_byte(img.at(y, x, c));
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
}

std::string image_hash(const Image& img) {
    return sha256_hex(img.pixels.data(), img.pixels.size() * sizeof(float));
}

}  // namespace anonydiff
