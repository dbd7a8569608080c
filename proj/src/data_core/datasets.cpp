#include <zlib.h>

#include <algorithm>
#include <array>
#include <cstring>
#include <fstream>
#include <map>

#include "sslpoison/data_core.hpp"
#include "sslpoison/image_io.hpp"
#include "sslpoison/synthetic.hpp"

namespace fs = std::filesystem;

namespace sslpoison {

namespace {

constexpr int kCifarSide = 32;
constexpr int kCifarPlane = kCifarSide * kCifarSide;

std::vector<std::uint8_t> read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("missing dataset file: " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

fs::path first_existing(const fs::path& root, std::initializer_list<fs::path> candidates,
                        const std::string& file) {
  for (const auto& c : candidates) {
    if (fs::exists(root / c / file)) return root / c;
  }
  return root;
}

std::string padded(std::size_t i, int width = 6) {
  std::string s = std::to_string(i);
  return std::string(width > static_cast<int>(s.size()) ? width - s.size() : 0, '0') + s;
}

// Record layout: `label_bytes` label bytes, then R, G, B planes of 32x32.
void read_cifar_batch(const fs::path& path, int label_bytes, int label_offset,
                      const std::string& id_prefix, std::vector<ImageExample>& out) {
  const auto bytes = read_file(path);
  const std::size_t record = label_bytes + 3 * kCifarPlane;
  if (bytes.empty() || bytes.size() % record != 0) {
    throw DataError("corrupt CIFAR batch (size " + std::to_string(bytes.size()) +
                    " not a multiple of " + std::to_string(record) + "): " + path.string());
  }
  const std::size_t n = bytes.size() / record;
  out.reserve(out.size() + n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint8_t* rec = bytes.data() + i * record;
    ImageExample ex;
    ex.id = id_prefix + padded(out.size());
    ex.shape = {kCifarSide, kCifarSide, 3};
    ex.label = rec[label_offset];
    ex.pixels.resize(ex.shape.size());
    const std::uint8_t* planes = rec + label_bytes;
    for (int p = 0; p < kCifarPlane; ++p) {
      for (int c = 0; c < 3; ++c) ex.pixels[p * 3 + c] = planes[c * kCifarPlane + p];
    }
    out.push_back(std::move(ex));
  }
}

void check_labels(const RawDataset& d) {
  for (const auto* part : {&d.train, &d.test}) {
    for (const auto& ex : *part) {
      if (!ex.label || *ex.label < 0 || *ex.label >= d.num_classes) {
        throw DataError(d.name + ": label out of range for " + ex.id);
      }
    }
  }
}

// ---------------------------------------------------------------- MAT v5

enum MatType : std::uint32_t {
  miINT8 = 1, miUINT8 = 2, miINT16 = 3, miUINT16 = 4, miINT32 = 5, miUINT32 = 6,
  miSINGLE = 7, miDOUBLE = 9, miINT64 = 12, miUINT64 = 13, miMATRIX = 14, miCOMPRESSED = 15,
};

struct MatArray {
  std::string name;
  std::vector<std::int64_t> dims;
  std::vector<double> values;  // column-major real part
};

struct MatCursor {
  const std::uint8_t* data;
  std::size_t size;
  std::size_t pos = 0;
  const fs::path* path;

  std::uint32_t u32() {
    if (pos + 4 > size) throw DataError("truncated MAT file: " + path->string());
    std::uint32_t v;
    std::memcpy(&v, data + pos, 4);
    pos += 4;
    return v;
  }
};

struct MatElement {
  std::uint32_t type;
  const std::uint8_t* bytes;
  std::size_t nbytes;
};

MatElement next_element(MatCursor& cur) {
  const std::uint32_t first = cur.u32();
  if ((first >> 16) != 0) {  // small data element: 4 bytes of payload inline
    MatElement e{first & 0xffffu, cur.data + cur.pos, first >> 16};
    cur.pos += 4;
    return e;
  }
  const std::uint32_t nbytes = cur.u32();
  if (cur.pos + nbytes > cur.size) throw DataError("truncated MAT element: " + cur.path->string());
  MatElement e{first, cur.data + cur.pos, nbytes};
  cur.pos += nbytes;
  if (first != miCOMPRESSED) cur.pos = std::min(cur.size, (cur.pos + 7) & ~std::size_t{7});
  return e;
}

std::vector<double> numeric_values(const MatElement& e, const fs::path& path) {
  auto read_as = [&](auto tag) {
    using T = decltype(tag);
    std::vector<double> v(e.nbytes / sizeof(T));
    for (std::size_t i = 0; i < v.size(); ++i) {
      T x;
      std::memcpy(&x, e.bytes + i * sizeof(T), sizeof(T));
      v[i] = static_cast<double>(x);
    }
    return v;
  };
  switch (e.type) {
    case miINT8: return read_as(std::int8_t{});
    case miUINT8: return read_as(std::uint8_t{});
    case miINT16: return read_as(std::int16_t{});
    case miUINT16: return read_as(std::uint16_t{});
    case miINT32: return read_as(std::int32_t{});
    case miUINT32: return read_as(std::uint32_t{});
    case miSINGLE: return read_as(float{});
    case miDOUBLE: return read_as(double{});
    case miINT64: return read_as(std::int64_t{});
    case miUINT64: return read_as(std::uint64_t{});
    default: throw DataError("unsupported MAT numeric type in " + path.string());
  }
}

MatArray parse_matrix(const MatElement& e, const fs::path& path) {
  MatCursor cur{e.bytes, e.nbytes, 0, &path};
  next_element(cur);  // array flags
  MatArray arr;
  const auto dims = next_element(cur);
  for (std::size_t i = 0; i + 4 <= dims.nbytes; i += 4) {
    std::int32_t d;
    std::memcpy(&d, dims.bytes + i, 4);
    arr.dims.push_back(d);
  }
  const auto name = next_element(cur);
  arr.name.assign(reinterpret_cast<const char*>(name.bytes), name.nbytes);
  arr.values = numeric_values(next_element(cur), path);
  return arr;
}

std::map<std::string, MatArray> read_mat_v5(const fs::path& path) {
  const auto bytes = read_file(path);
  if (bytes.size() < 128) throw DataError("not a MAT v5 file: " + path.string());
  std::map<std::string, MatArray> out;
  MatCursor cur{bytes.data(), bytes.size(), 128, &path};
  while (cur.pos + 8 <= cur.size) {
    const auto e = next_element(cur);
    if (e.type == miMATRIX) {
      auto arr = parse_matrix(e, path);
      out[arr.name] = std::move(arr);
    } else if (e.type == miCOMPRESSED) {
      // Inflate in growing chunks; the inflated size is not stored.
      std::vector<std::uint8_t> inflated;
      z_stream zs{};
      if (inflateInit(&zs) != Z_OK) throw DataError("zlib init failed: " + path.string());
      zs.next_in = const_cast<Bytef*>(e.bytes);
      zs.avail_in = static_cast<uInt>(e.nbytes);
      std::array<std::uint8_t, 1 << 16> chunk{};
      int rc = Z_OK;
      while (rc != Z_STREAM_END) {
        zs.next_out = chunk.data();
        zs.avail_out = chunk.size();
        rc = inflate(&zs, Z_NO_FLUSH);
        if (rc != Z_OK && rc != Z_STREAM_END) {
          inflateEnd(&zs);
          throw DataError("corrupt compressed MAT element: " + path.string());
        }
        inflated.insert(inflated.end(), chunk.data(), chunk.data() + (chunk.size() - zs.avail_out));
      }
      inflateEnd(&zs);
      MatCursor inner{inflated.data(), inflated.size(), 0, &path};
      const auto m = next_element(inner);
      if (m.type == miMATRIX) {
        auto arr = parse_matrix(m, path);
        out[arr.name] = std::move(arr);
      }
    }
  }
  return out;
}

std::vector<ImageExample> svhn_split(const fs::path& path, const std::string& prefix) {
  auto arrays = read_mat_v5(path);
  if (!arrays.contains("X") || !arrays.contains("y")) {
    throw DataError("SVHN file lacks X/y arrays: " + path.string());
  }
  const auto& X = arrays["X"];
  const auto& y = arrays["y"];
  if (X.dims.size() != 4 || X.dims[2] != 3) throw DataError("unexpected SVHN X shape: " + path.string());
  const auto h = X.dims[0], w = X.dims[1], n = X.dims[3];
  if (static_cast<std::int64_t>(y.values.size()) != n) {
    throw DataError("SVHN X/y length mismatch: " + path.string());
  }
  std::vector<ImageExample> out;
  out.reserve(n);
  for (std::int64_t i = 0; i < n; ++i) {
    ImageExample ex;
    ex.id = prefix + padded(i);
    ex.shape = {static_cast<int>(h), static_cast<int>(w), 3};
    ex.pixels.resize(ex.shape.size());
    for (std::int64_t r = 0; r < h; ++r) {
      for (std::int64_t c = 0; c < w; ++c) {
        for (int ch = 0; ch < 3; ++ch) {
          const auto src = r + h * (c + w * (ch + 3 * i));
          ex.pixels[(r * w + c) * 3 + ch] = static_cast<std::uint8_t>(X.values[src]);
        }
      }
    }
    const int label = static_cast<int>(y.values[i]);
    ex.label = label == 10 ? 0 : label;
    out.push_back(std::move(ex));
  }
  return out;
}

void load_folder_split(const fs::path& dir, const std::string& prefix,
                       std::map<std::string, int>& class_index, std::vector<ImageExample>& out,
                       ImageShape& shape) {
  std::vector<fs::path> class_dirs;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_directory()) class_dirs.push_back(entry.path());
  }
  std::sort(class_dirs.begin(), class_dirs.end(), [](const fs::path& a, const fs::path& b) {
    const auto sa = a.filename().string(), sb = b.filename().string();
    return sa.size() != sb.size() ? sa.size() < sb.size() : sa < sb;
  });
  for (const auto& cdir : class_dirs) {
    const std::string cname = cdir.filename().string();
    if (!class_index.contains(cname)) {
      // Numeric directory names are class indices; others are numbered in sorted order.
      const bool numeric = !cname.empty() && std::all_of(cname.begin(), cname.end(), ::isdigit);
      class_index[cname] = numeric ? std::stoi(cname) : static_cast<int>(class_index.size());
    }
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(cdir)) {
      if (entry.is_regular_file() && entry.path().extension() == ".png") files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      ImageExample ex;
      ex.pixels = read_png(f, ex.shape);
      if (shape.size() == 0) shape = ex.shape;
      if (!(ex.shape == shape)) throw DataError("inconsistent image shape: " + f.string());
      ex.id = prefix + cname + "-" + f.stem().string();
      ex.label = class_index[cname];
      out.push_back(std::move(ex));
    }
  }
}

}  // namespace

std::string to_string(Origin origin) { return origin == Origin::clean ? "clean" : "poisoned"; }
std::string to_string(PoisonMode mode) {
  return mode == PoisonMode::consistent ? "consistent" : "inconsistent";
}
Origin origin_from_string(const std::string& s) {
  if (s == "clean") return Origin::clean;
  if (s == "poisoned") return Origin::poisoned;
  throw DataError("unknown origin: " + s);
}
PoisonMode poison_mode_from_string(const std::string& s) {
  if (s == "consistent") return PoisonMode::consistent;
  if (s == "inconsistent") return PoisonMode::inconsistent;
  throw DataError("unknown poison mode: " + s);
}

RawDataset load_cifar10(const fs::path& root) {
  const fs::path dir = first_existing(root, {"", "cifar-10-batches-bin"}, "test_batch.bin");
  RawDataset d;
  d.name = "cifar10";
  d.num_classes = 10;
  d.shape = {kCifarSide, kCifarSide, 3};
  for (int b = 1; b <= 5; ++b) {
    read_cifar_batch(dir / ("data_batch_" + std::to_string(b) + ".bin"), 1, 0, "train-", d.train);
  }
  read_cifar_batch(dir / "test_batch.bin", 1, 0, "test-", d.test);
  check_labels(d);
  return d;
}

RawDataset load_cifar100(const fs::path& root) {
  const fs::path dir = first_existing(root, {"", "cifar-100-binary"}, "test.bin");
  RawDataset d;
  d.name = "cifar100";
  d.num_classes = 100;
  d.shape = {kCifarSide, kCifarSide, 3};
  read_cifar_batch(dir / "train.bin", 2, 1, "train-", d.train);
  read_cifar_batch(dir / "test.bin", 2, 1, "test-", d.test);
  check_labels(d);
  return d;
}

RawDataset load_svhn(const fs::path& root) {
  RawDataset d;
  d.name = "svhn";
  d.num_classes = 10;
  d.shape = {32, 32, 3};
  d.train = svhn_split(root / "train_32x32.mat", "train-");
  d.test = svhn_split(root / "test_32x32.mat", "test-");
  if (!d.train.empty()) d.shape = d.train.front().shape;
  check_labels(d);
  return d;
}

RawDataset load_image_folder(const fs::path& root, const std::string& name) {
  if (!fs::is_directory(root)) throw DataError("missing dataset directory: " + root.string());
  RawDataset d;
  d.name = name;
  std::map<std::string, int> class_index;
  if (fs::is_directory(root / "train")) {
    load_folder_split(root / "train", "train-", class_index, d.train, d.shape);
    if (fs::is_directory(root / "test")) load_folder_split(root / "test", "test-", class_index, d.test, d.shape);
  } else {
    load_folder_split(root, "", class_index, d.train, d.shape);
  }
  for (const auto& [cname, index] : class_index) d.num_classes = std::max(d.num_classes, index + 1);
  if (d.train.empty()) throw DataError("no PNG images found under " + root.string());
  return d;
}

void save_image_folder(const RawDataset& dataset, const fs::path& root) {
  for (const auto& [part, examples] : {std::pair{"train", &dataset.train}, std::pair{"test", &dataset.test}}) {
    for (const auto& ex : *examples) {
      const fs::path dir = root / part / std::to_string(ex.label.value_or(0));
      fs::create_directories(dir);
      write_png(dir / (ex.id + ".png"), ex.shape, ex.pixels);
    }
  }
}

RawDataset load_dataset(const std::string& name, const fs::path& root) {
  if (name == "cifar10") return load_cifar10(root);
  if (name == "cifar100") return load_cifar100(root);
  if (name == "svhn") return load_svhn(root);
  if (name == "toy-shapes") return make_toy_shapes({});
  return load_image_folder(root, name);
}

}  // namespace sslpoison
