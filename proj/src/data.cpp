#include "ntklab/data.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "ntklab/rng.hpp"

namespace ntklab {

TaskKind task_kind_from_string(const std::string& s) {
    if (s == "mnist_odd_even") return TaskKind::mnist_odd_even;
    if (s == "cifar_animal_vehicle") return TaskKind::cifar_animal_vehicle;
    if (s == "mnist_10") return TaskKind::mnist_10;
    if (s == "cifar_10") return TaskKind::cifar_10;
    throw ValidationError("unknown task kind: " + s);
}

std::string to_string(TaskKind k) {
    switch (k) {
        case TaskKind::mnist_odd_even:
            return "mnist_odd_even";
        case TaskKind::cifar_animal_vehicle:
            return "cifar_animal_vehicle";
        case TaskKind::mnist_10:
            return "mnist_10";
        case TaskKind::cifar_10:
            return "cifar_10";
    }
    return "?";
}

bool task_is_binary(TaskKind k) {
    return k == TaskKind::mnist_odd_even || k == TaskKind::cifar_animal_vehicle;
}

std::string Normalization::describe() const {
    std::ostringstream os;
    os.precision(12);
    os << "scale=" << scale << ",shift=" << shift << ",unit_sphere=" << (unit_sphere ? 1 : 0);
    return os.str();
}

void TaskSpec::validate() const {
    require(n_per_class >= 1, "task: n_per_class must be >= 1");
}

namespace {

std::vector<std::uint8_t> read_file_maybe_gz(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ValidationError("cannot open " + path);
    std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(f)),
                                  std::istreambuf_iterator<char>());
    if (buf.size() >= 2 && buf[0] == 0x1f && buf[1] == 0x8b) {
        std::vector<std::uint8_t> out;
        out.reserve(buf.size() * 4);
        z_stream zs{};
        if (inflateInit2(&zs, 16 + MAX_WBITS) != Z_OK)
            throw NumericalError("zlib init failed for " + path);
        zs.next_in = buf.data();
        zs.avail_in = static_cast<uInt>(buf.size());
        std::vector<std::uint8_t> chunk(1 << 20);
        int rc = Z_OK;
        while (rc != Z_STREAM_END) {
            zs.next_out = chunk.data();
            zs.avail_out = static_cast<uInt>(chunk.size());
            rc = inflate(&zs, Z_NO_FLUSH);
            if (rc != Z_OK && rc != Z_STREAM_END) {
                inflateEnd(&zs);
                throw ValidationError("corrupt gzip stream in " + path);
            }
            out.insert(out.end(), chunk.data(), chunk.data() + (chunk.size() - zs.avail_out));
        }
        inflateEnd(&zs);
        return out;
    }
    return buf;
}

std::uint32_t be32(const std::vector<std::uint8_t>& b, std::size_t off, const std::string& path) {
    if (off + 4 > b.size())
        throw ValidationError(path + ": truncated at offset " + std::to_string(off));
    return (std::uint32_t(b[off]) << 24) | (std::uint32_t(b[off + 1]) << 16) |
           (std::uint32_t(b[off + 2]) << 8) | std::uint32_t(b[off + 3]);
}

}  // namespace

RawDataset load_mnist(const std::string& images_path, const std::string& labels_path) {
    const auto img = read_file_maybe_gz(images_path);
    const auto lbl = read_file_maybe_gz(labels_path);

    const std::uint32_t img_magic = be32(img, 0, images_path);
    if (img_magic != 0x00000803)
        throw ValidationError(images_path + ": bad IDX magic at offset 0 (got 0x" +
                              [&] {
                                  std::ostringstream os;
                                  os << std::hex << img_magic;
                                  return os.str();
                              }() +
                              ", want 0x803)");
    const std::uint32_t n = be32(img, 4, images_path);
    const std::uint32_t rows = be32(img, 8, images_path);
    const std::uint32_t cols = be32(img, 12, images_path);
    const std::size_t want = 16 + std::size_t(n) * rows * cols;
    if (img.size() < want)
        throw ValidationError(images_path + ": truncated at offset " + std::to_string(img.size()) +
                              " (expected " + std::to_string(want) + " bytes)");

    const std::uint32_t lbl_magic = be32(lbl, 0, labels_path);
    if (lbl_magic != 0x00000801)
        throw ValidationError(labels_path + ": bad IDX magic at offset 0");
    const std::uint32_t nl = be32(lbl, 4, labels_path);
    if (nl != n)
        throw ValidationError("MNIST image/label count mismatch: " + std::to_string(n) + " vs " +
                              std::to_string(nl));
    if (lbl.size() < 8 + nl)
        throw ValidationError(labels_path + ": truncated at offset " + std::to_string(lbl.size()));

    RawDataset raw;
    raw.n = static_cast<int>(n);
    raw.dim = static_cast<int>(rows * cols);
    raw.pixels.assign(img.begin() + 16, img.begin() + 16 + std::size_t(n) * raw.dim);
    raw.class_ids.resize(n);
    for (std::uint32_t i = 0; i < n; ++i) {
        const int c = lbl[8 + i];
        if (c < 0 || c > 9)
            throw ValidationError(labels_path + ": label out of range at index " + std::to_string(i));
        raw.class_ids[i] = c;
    }
    raw.checksum = fnv1a64(raw.pixels.data(), raw.pixels.size());
    raw.checksum = fnv1a64(raw.class_ids.data(), raw.class_ids.size() * sizeof(int), raw.checksum);
    return raw;
}

RawDataset load_cifar10(const std::vector<std::string>& batch_paths) {
    require(!batch_paths.empty(), "load_cifar10: no batch files given");
    RawDataset raw;
    raw.dim = 3072;
    for (const auto& path : batch_paths) {
        const auto buf = read_file_maybe_gz(path);
        if (buf.size() % 3073 != 0)
            throw ValidationError(path + ": size " + std::to_string(buf.size()) +
                                  " is not a multiple of 3073");
        const std::size_t records = buf.size() / 3073;
        for (std::size_t r = 0; r < records; ++r) {
            const std::uint8_t label = buf[r * 3073];
            if (label > 9)
                throw ValidationError(path + ": label out of range in record " + std::to_string(r));
            raw.class_ids.push_back(label);
            raw.pixels.insert(raw.pixels.end(), buf.begin() + static_cast<long>(r * 3073 + 1),
                              buf.begin() + static_cast<long>((r + 1) * 3073));
        }
    }
    raw.n = static_cast<int>(raw.class_ids.size());
    raw.checksum = fnv1a64(raw.pixels.data(), raw.pixels.size());
    raw.checksum = fnv1a64(raw.class_ids.data(), raw.class_ids.size() * sizeof(int), raw.checksum);
    return raw;
}

Normalization default_normalization(const RawDataset& raw) {
    double sum = 0.0;
    for (std::uint8_t p : raw.pixels) sum += p;
    Normalization norm;
    norm.shift = sum / (255.0 * static_cast<double>(raw.pixels.size()));
    return norm;
}

namespace {

// CIFAR-10 classes: airplane automobile bird cat deer dog frog horse ship truck
bool cifar_is_animal(int c) { return c >= 2 && c <= 7; }
bool mnist_is_odd(int c) { return c % 2 == 1; }

}  // namespace

LabeledDataset make_task(const RawDataset& raw, const TaskSpec& spec, const Normalization& norm) {
    spec.validate();
    require(raw.n >= 1, "make_task: empty raw dataset");
    const bool binary = task_is_binary(spec.kind);
    const bool is_mnist = spec.kind == TaskKind::mnist_odd_even || spec.kind == TaskKind::mnist_10;
    require(raw.dim == (is_mnist ? 784 : 3072), "make_task: raw dimension does not match the task");

    // task class of each raw example: binary side (1 = odd/animal) or digit
    const int n_task_classes = binary ? 2 : 10;
    std::vector<std::vector<int>> members(static_cast<std::size_t>(n_task_classes));
    for (int i = 0; i < raw.n; ++i) {
        int tc;
        if (binary)
            tc = (is_mnist ? mnist_is_odd(raw.class_ids[i]) : cifar_is_animal(raw.class_ids[i])) ? 1
                                                                                                 : 0;
        else
            tc = raw.class_ids[i];
        members[static_cast<std::size_t>(tc)].push_back(i);
    }

    Rng rng(spec.seed);
    std::vector<int> chosen;
    std::vector<int> task_ids;
    for (int c = 0; c < n_task_classes; ++c) {
        auto& pool = members[static_cast<std::size_t>(c)];
        if (static_cast<int>(pool.size()) < spec.n_per_class)
            throw ValidationError("make_task: class " + std::to_string(c) + " has only " +
                                  std::to_string(pool.size()) + " examples, need " +
                                  std::to_string(spec.n_per_class));
        for (int idx : rng.sample_indices(static_cast<int>(pool.size()), spec.n_per_class)) {
            chosen.push_back(pool[static_cast<std::size_t>(idx)]);
            task_ids.push_back(c);
        }
    }

    LabeledDataset out;
    const int N = static_cast<int>(chosen.size());
    out.images.resize(N, raw.dim);
    out.raw_class_ids.resize(N);
    out.task_class_ids = task_ids;
    for (int i = 0; i < N; ++i) {
        const int src = chosen[static_cast<std::size_t>(i)];
        out.raw_class_ids[static_cast<std::size_t>(i)] = raw.class_ids[static_cast<std::size_t>(src)];
        const std::uint8_t* px = raw.pixels.data() + static_cast<std::size_t>(src) * raw.dim;
        for (int j = 0; j < raw.dim; ++j) out.images(i, j) = norm.apply(px[j]);
        if (norm.unit_sphere || spec.unit_sphere) {
            const double nrm = out.images.row(i).norm();
            require(nrm > 0.0, "make_task: zero-norm image under unit-sphere mode");
            out.images.row(i) /= nrm;
        }
    }
    if (binary)
        out.labels = encode_labels(LabelScheme::binary, task_ids, 2, spec.negative_label);
    else
        out.labels = encode_labels(LabelScheme::multiclass, task_ids, 10);
    Normalization used = norm;
    used.unit_sphere = norm.unit_sphere || spec.unit_sphere;
    out.normalization = used.describe();
    return out;
}

void export_grid(const Mat& images, int cols, const Normalization& norm, const std::string& path) {
    const int N = static_cast<int>(images.rows());
    const int d = static_cast<int>(images.cols());
    require(N >= 1, "export_grid: no images");
    require(d == 784 || d == 3072, "export_grid: unsupported image dimension " + std::to_string(d));
    require(cols >= 1, "export_grid: cols must be >= 1");
    const bool color = d == 3072;
    const int side = color ? 32 : 28;
    const int rows = (N + cols - 1) / cols;

    auto denorm = [&](double v) {
        const double p = std::round((v + norm.shift) / norm.scale);
        return static_cast<std::uint8_t>(std::min(255.0, std::max(0.0, p)));
    };

    std::ofstream f(path, std::ios::binary);
    if (!f) throw ValidationError("export_grid: cannot open " + path);
    f << (color ? "P6" : "P5") << "\n";
    f << "# ntklab-grid n=" << N << " cols=" << cols << " d=" << d << "\n";
    f << cols * side << " " << rows * side << "\n255\n";
    const int channels = color ? 3 : 1;
    std::vector<std::uint8_t> canvas(static_cast<std::size_t>(rows * side) * cols * side * channels,
                                     0);
    for (int i = 0; i < N; ++i) {
        const int tr = i / cols, tc = i % cols;
        for (int y = 0; y < side; ++y)
            for (int x = 0; x < side; ++x) {
                const std::size_t base =
                    ((static_cast<std::size_t>(tr) * side + y) * (cols * side) + tc * side + x) *
                    channels;
                if (color) {
                    // CIFAR channel-major: R plane, G plane, B plane
                    for (int ch = 0; ch < 3; ++ch)
                        canvas[base + ch] = denorm(images(i, ch * 1024 + y * side + x));
                } else {
                    canvas[base] = denorm(images(i, y * side + x));
                }
            }
    }
    f.write(reinterpret_cast<const char*>(canvas.data()),
            static_cast<std::streamsize>(canvas.size()));
    if (!f) throw NumericalError("export_grid: write failed for " + path);
}

Mat import_grid(const std::string& path, const Normalization& norm) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ValidationError("import_grid: cannot open " + path);
    std::string magic;
    f >> magic;
    require(magic == "P5" || magic == "P6", "import_grid: not a ntklab grid file");
    f.ignore();
    std::string comment;
    std::getline(f, comment);
    int n = 0, cols = 0, d = 0;
    if (std::sscanf(comment.c_str(), "# ntklab-grid n=%d cols=%d d=%d", &n, &cols, &d) != 3)
        throw ValidationError("import_grid: missing layout header in " + path);
    int W = 0, H = 0, maxv = 0;
    f >> W >> H >> maxv;
    f.ignore();
    const bool color = magic == "P6";
    const int side = color ? 32 : 28;
    const int channels = color ? 3 : 1;
    std::vector<std::uint8_t> canvas(static_cast<std::size_t>(W) * H * channels);
    f.read(reinterpret_cast<char*>(canvas.data()), static_cast<std::streamsize>(canvas.size()));
    if (!f) throw ValidationError("import_grid: truncated file " + path);

    Mat images(n, d);
    for (int i = 0; i < n; ++i) {
        const int tr = i / cols, tc = i % cols;
        for (int y = 0; y < side; ++y)
            for (int x = 0; x < side; ++x) {
                const std::size_t base =
                    ((static_cast<std::size_t>(tr) * side + y) * W + tc * side + x) * channels;
                if (color) {
                    for (int ch = 0; ch < 3; ++ch)
                        images(i, ch * 1024 + y * side + x) =
                            static_cast<double>(canvas[base + ch]) * norm.scale - norm.shift;
                } else {
                    images(i, y * side + x) = static_cast<double>(canvas[base]) * norm.scale -
                                              norm.shift;
                }
            }
    }
    return images;
}

namespace {
constexpr char kDataMagic[8] = {'N', 'T', 'K', 'D', 'A', 'T', 'A', '1'};
}

void save_dataset_cache(const std::string& path, const LabeledDataset& data) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw ValidationError("save_dataset_cache: cannot open " + path);
    const std::uint32_t N = static_cast<std::uint32_t>(data.n());
    const std::uint32_t d = static_cast<std::uint32_t>(data.dim());
    const std::uint32_t C = static_cast<std::uint32_t>(data.classes());
    std::uint64_t checksum = fnv1a64(data.images.data(), sizeof(double) * N * d);
    checksum = fnv1a64(data.labels.data(), sizeof(double) * N * C, checksum);
    f.write(kDataMagic, 8);
    f.write(reinterpret_cast<const char*>(&checksum), 8);
    f.write(reinterpret_cast<const char*>(&N), 4);
    f.write(reinterpret_cast<const char*>(&d), 4);
    f.write(reinterpret_cast<const char*>(&C), 4);
    const std::uint16_t nl = static_cast<std::uint16_t>(data.normalization.size());
    f.write(reinterpret_cast<const char*>(&nl), 2);
    f.write(data.normalization.data(), nl);
    f.write(reinterpret_cast<const char*>(data.images.data()),
            static_cast<std::streamsize>(sizeof(double) * N * d));
    f.write(reinterpret_cast<const char*>(data.labels.data()),
            static_cast<std::streamsize>(sizeof(double) * N * C));
    f.write(reinterpret_cast<const char*>(data.raw_class_ids.data()),
            static_cast<std::streamsize>(sizeof(int) * N));
    f.write(reinterpret_cast<const char*>(data.task_class_ids.data()),
            static_cast<std::streamsize>(sizeof(int) * N));
    if (!f) throw NumericalError("save_dataset_cache: write failed for " + path);
}

LabeledDataset load_dataset_cache(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ValidationError("load_dataset_cache: cannot open " + path);
    char magic[8];
    f.read(magic, 8);
    if (!f || std::memcmp(magic, kDataMagic, 8) != 0)
        throw ValidationError("load_dataset_cache: bad magic in " + path);
    std::uint64_t checksum = 0;
    std::uint32_t N = 0, d = 0, C = 0;
    f.read(reinterpret_cast<char*>(&checksum), 8);
    f.read(reinterpret_cast<char*>(&N), 4);
    f.read(reinterpret_cast<char*>(&d), 4);
    f.read(reinterpret_cast<char*>(&C), 4);
    std::uint16_t nl = 0;
    f.read(reinterpret_cast<char*>(&nl), 2);
    LabeledDataset data;
    data.normalization.resize(nl);
    f.read(data.normalization.data(), nl);
    data.images.resize(N, d);
    data.labels.resize(N, C);
    data.raw_class_ids.resize(N);
    data.task_class_ids.resize(N);
    f.read(reinterpret_cast<char*>(data.images.data()),
           static_cast<std::streamsize>(sizeof(double) * N * d));
    f.read(reinterpret_cast<char*>(data.labels.data()),
           static_cast<std::streamsize>(sizeof(double) * N * C));
    f.read(reinterpret_cast<char*>(data.raw_class_ids.data()),
           static_cast<std::streamsize>(sizeof(int) * N));
    f.read(reinterpret_cast<char*>(data.task_class_ids.data()),
           static_cast<std::streamsize>(sizeof(int) * N));
    if (!f) throw ValidationError("load_dataset_cache: truncated file " + path);
    std::uint64_t want = fnv1a64(data.images.data(), sizeof(double) * N * d);
    want = fnv1a64(data.labels.data(), sizeof(double) * N * C, want);
    if (want != checksum) throw ValidationError("load_dataset_cache: checksum mismatch in " + path);
    return data;
}

}  // namespace ntklab
