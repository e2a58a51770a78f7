#include "fmdt/dataset.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <vector>

namespace fmdt {

namespace {

constexpr char kMagic[6] = {'F', 'M', 'D', 'T', '1', '\0'};

void write_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4];
  b[0] = v & 0xff;
  b[1] = (v >> 8) & 0xff;
  b[2] = (v >> 16) & 0xff;
  b[3] = (v >> 24) & 0xff;
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw std::runtime_error("dataset file truncated");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

void write_f32(std::ostream& os, float v) {
  static_assert(sizeof(float) == 4);
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  write_u32(os, bits);
}

float read_f32(std::istream& is) {
  std::uint32_t bits = read_u32(is);
  float v;
  std::memcpy(&v, &bits, 4);
  return v;
}

}  // namespace

Dataset::Dataset(Mat points, std::string name, std::optional<ImageShape> shape)
    : points_(std::move(points)), name_(std::move(name)), shape_(shape) {
  if (points_.cols() < 1) throw std::invalid_argument("dataset must contain at least one point");
  if (points_.rows() < 1) throw std::invalid_argument("dataset dimension must be >= 1");
  if (!points_.allFinite()) throw std::invalid_argument("dataset entries must be finite");
  if (shape_ && shape_->size() != static_cast<std::uint64_t>(points_.rows()))
    throw std::invalid_argument("dataset shape does not match dimension");
}

double Dataset::value_range() const {
  return points_.maxCoeff() - points_.minCoeff();
}

void Dataset::save(const std::filesystem::path& file) const {
  std::ofstream os(file, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open for writing: " + file.string());
  os.write(kMagic, sizeof(kMagic));
  write_u32(os, static_cast<std::uint32_t>(size()));
  write_u32(os, static_cast<std::uint32_t>(dim()));
  os.put(shape_ ? 1 : 0);
  if (shape_) {
    write_u32(os, shape_->channels);
    write_u32(os, shape_->height);
    write_u32(os, shape_->width);
  }
  // row-major sample order: all coordinates of point 0, then point 1, ...
  for (Eigen::Index j = 0; j < size(); ++j)
    for (Eigen::Index i = 0; i < dim(); ++i)
      write_f32(os, static_cast<float>(points_(i, j)));
  if (!os) throw std::runtime_error("write failed: " + file.string());
}

Dataset Dataset::load(const std::filesystem::path& file) {
  std::ifstream is(file, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open dataset: " + file.string());
  char magic[6];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw std::runtime_error("bad dataset magic in " + file.string());
  std::uint32_t n = read_u32(is);
  std::uint32_t d = read_u32(is);
  int has_shape = is.get();
  if (has_shape != 0 && has_shape != 1)
    throw std::runtime_error("bad shape flag in " + file.string());
  std::optional<ImageShape> shape;
  if (has_shape) {
    ImageShape s;
    s.channels = read_u32(is);
    s.height = read_u32(is);
    s.width = read_u32(is);
    shape = s;
  }
  Mat pts(d, n);
  for (std::uint32_t j = 0; j < n; ++j)
    for (std::uint32_t i = 0; i < d; ++i)
      pts(i, j) = static_cast<double>(read_f32(is));
  return Dataset(std::move(pts), file.stem().string(), shape);
}

Dataset Dataset::from_csv(const std::filesystem::path& file, std::string name) {
  std::ifstream is(file);
  if (!is) throw std::runtime_error("cannot open csv: " + file.string());
  std::vector<std::vector<double>> rows;
  std::string line;
  bool first = true;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<double> row;
    std::stringstream ss(line);
    std::string cell;
    bool numeric = true;
    while (std::getline(ss, cell, ',')) {
      try {
        std::size_t pos = 0;
        double v = std::stod(cell, &pos);
        while (pos < cell.size() && std::isspace(static_cast<unsigned char>(cell[pos]))) ++pos;
        if (pos != cell.size()) throw std::invalid_argument(cell);
        row.push_back(v);
      } catch (const std::exception&) {
        numeric = false;
        break;
      }
    }
    if (!numeric) {
      if (first) {
        first = false;  // header row
        continue;
      }
      throw std::runtime_error("non-numeric cell in " + file.string());
    }
    first = false;
    if (!rows.empty() && row.size() != rows.front().size())
      throw std::runtime_error("ragged rows in " + file.string());
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw std::runtime_error("no samples in " + file.string());
  Mat pts(rows.front().size(), rows.size());
  for (std::size_t j = 0; j < rows.size(); ++j)
    for (std::size_t i = 0; i < rows[j].size(); ++i)
      pts(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[j][i];
  return Dataset(std::move(pts), std::move(name));
}

}  // namespace fmdt
