#include "mitl/image_io.hpp"

#include <cmath>
#include <fstream>

namespace mitl {
namespace {

void skip_ws_and_comments(std::istream& in) {
    int ch = in.peek();
    while (ch == ' ' || ch == '\t' || ch == '\n' || ch == '\r' || ch == '#') {
        if (ch == '#') {
            std::string line;
            std::getline(in, line);
        } else {
            in.get();
        }
        ch = in.peek();
    }
}

int read_header_int(std::istream& in, const std::filesystem::path& path) {
    skip_ws_and_comments(in);
    int value = -1;
    in >> value;
    if (!in || value < 0)
        throw Error(ErrorCode::CorruptFile, "bad raster header in " + path.string());
    return value;
}

std::ifstream open_for_read(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path))
        throw Error(ErrorCode::MissingFile, path.string());
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::IoError, "cannot open " + path.string());
    return in;
}

} // namespace

void write_ppm(const Tensor& rgb, const std::filesystem::path& path) {
    if (rgb.n != 1 || rgb.c != 3)
        throw Error(ErrorCode::ShapeMismatch, "write_ppm expects [1,3,H,W], got " + rgb.shape_str());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(ErrorCode::IoError, "cannot write " + path.string());
    out << "P6\n" << rgb.w << " " << rgb.h << "\n255\n";
    std::vector<unsigned char> row(static_cast<size_t>(rgb.w) * 3);
    for (int y = 0; y < rgb.h; ++y) {
        for (int x = 0; x < rgb.w; ++x)
            for (int ch = 0; ch < 3; ++ch) {
                float v = rgb.at(0, ch, y, x);
                int q = static_cast<int>(std::lround(v * 255.0f));
                q = q < 0 ? 0 : (q > 255 ? 255 : q);
                row[static_cast<size_t>(x) * 3 + ch] = static_cast<unsigned char>(q);
            }
        out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
    }
    if (!out) throw Error(ErrorCode::IoError, "short write to " + path.string());
}

Tensor read_ppm(const std::filesystem::path& path) {
    std::ifstream in = open_for_read(path);
    std::string magic;
    in >> magic;
    if (magic != "P6") throw Error(ErrorCode::CorruptFile, "not a P6 file: " + path.string());
    int w = read_header_int(in, path);
    int h = read_header_int(in, path);
    int maxval = read_header_int(in, path);
    if (maxval != 255) throw Error(ErrorCode::CorruptFile, "unsupported maxval in " + path.string());
    in.get(); // single whitespace after maxval
    Tensor rgb(1, 3, h, w);
    std::vector<unsigned char> row(static_cast<size_t>(w) * 3);
    for (int y = 0; y < h; ++y) {
        in.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(row.size()));
        if (!in) throw Error(ErrorCode::CorruptFile, "truncated raster " + path.string());
        for (int x = 0; x < w; ++x)
            for (int ch = 0; ch < 3; ++ch)
                rgb.at(0, ch, y, x) = static_cast<float>(row[static_cast<size_t>(x) * 3 + ch]) / 255.0f;
    }
    return rgb;
}

void write_pgm(const Tensor& map, int maxval, const std::filesystem::path& path) {
    if (map.n != 1 || map.c != 1)
        throw Error(ErrorCode::ShapeMismatch, "write_pgm expects [1,1,H,W], got " + map.shape_str());
    if (maxval < 1 || maxval > 255)
        throw Error(ErrorCode::InvalidSpec, "pgm maxval out of range");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(ErrorCode::IoError, "cannot write " + path.string());
    out << "P5\n" << map.w << " " << map.h << "\n" << maxval << "\n";
    std::vector<unsigned char> row(static_cast<size_t>(map.w));
    for (int y = 0; y < map.h; ++y) {
        for (int x = 0; x < map.w; ++x) {
            int q = static_cast<int>(std::lround(map.at(0, 0, y, x)));
            q = q < 0 ? 0 : (q > maxval ? maxval : q);
            row[static_cast<size_t>(x)] = static_cast<unsigned char>(q);
        }
        out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
    }
    if (!out) throw Error(ErrorCode::IoError, "short write to " + path.string());
}

Tensor read_pgm(const std::filesystem::path& path) {
    std::ifstream in = open_for_read(path);
    std::string magic;
    in >> magic;
    if (magic != "P5") throw Error(ErrorCode::CorruptFile, "not a P5 file: " + path.string());
    int w = read_header_int(in, path);
    int h = read_header_int(in, path);
    int maxval = read_header_int(in, path);
    if (maxval < 1 || maxval > 255)
        throw Error(ErrorCode::CorruptFile, "unsupported maxval in " + path.string());
    in.get();
    Tensor map(1, 1, h, w);
    std::vector<unsigned char> row(static_cast<size_t>(w));
    for (int y = 0; y < h; ++y) {
        in.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(row.size()));
        if (!in) throw Error(ErrorCode::CorruptFile, "truncated raster " + path.string());
        for (int x = 0; x < w; ++x) map.at(0, 0, y, x) = static_cast<float>(row[static_cast<size_t>(x)]);
    }
    return map;
}

} // namespace mitl
