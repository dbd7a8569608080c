#include <openssl/evp.h>

#include <iomanip>
#include <sstream>

#include "sslpoison/model_zoo.hpp"

namespace sslpoison {

namespace {

void write_module(torch::serialize::OutputArchive& archive, const torch::nn::Module& module) {
  for (const auto& item : module.named_parameters(true)) archive.write("param/" + item.key(), item.value().detach());
  for (const auto& item : module.named_buffers(true)) archive.write("buffer/" + item.key(), item.value(), true);
}

void read_module(torch::serialize::InputArchive& archive, torch::nn::Module& module) {
  torch::NoGradGuard guard;
  for (auto& item : module.named_parameters(true)) {
    torch::Tensor t;
    archive.read("param/" + item.key(), t);
    item.value().copy_(t);
  }
  for (auto& item : module.named_buffers(true)) {
    torch::Tensor t;
    archive.read("buffer/" + item.key(), t, true);
    item.value().copy_(t);
  }
}

std::string read_string(torch::serialize::InputArchive& archive, const std::string& key) {
  c10::IValue v;
  archive.read(key, v);
  return v.toStringRef();
}

std::int64_t read_int(torch::serialize::InputArchive& archive, const std::string& key) {
  c10::IValue v;
  archive.read(key, v);
  return v.toInt();
}

double read_double(torch::serialize::InputArchive& archive, const std::string& key) {
  c10::IValue v;
  archive.read(key, v);
  return v.toDouble();
}

void write_shape(torch::serialize::OutputArchive& a, const ImageShape& s) {
  a.write("input_height", c10::IValue(static_cast<std::int64_t>(s.height)));
  a.write("input_width", c10::IValue(static_cast<std::int64_t>(s.width)));
  a.write("input_channels", c10::IValue(static_cast<std::int64_t>(s.channels)));
}

ImageShape read_shape(torch::serialize::InputArchive& a) {
  return {static_cast<int>(read_int(a, "input_height")), static_cast<int>(read_int(a, "input_width")),
          static_cast<int>(read_int(a, "input_channels"))};
}

torch::serialize::InputArchive open_archive(const std::filesystem::path& path, const std::string& kind) {
  if (!std::filesystem::exists(path)) throw ModelError("checkpoint not found: " + path.string());
  torch::serialize::InputArchive archive;
  archive.load_from(path.string());
  if (read_string(archive, "kind") != kind) throw ModelError(path.string() + " is not a " + kind + " checkpoint");
  return archive;
}

}  // namespace

void save_classifier(const ClassifierModel& model, const std::filesystem::path& path) {
  torch::serialize::OutputArchive a;
  const auto& s = model.spec();
  a.write("kind", c10::IValue(std::string("classifier")));
  a.write("architecture_id", c10::IValue(to_string(s.arch)));
  a.write("num_classes", c10::IValue(static_cast<std::int64_t>(s.num_classes)));
  a.write("width", c10::IValue(static_cast<std::int64_t>(s.width)));
  a.write("dropout", c10::IValue(s.dropout));
  write_shape(a, s.input);
  a.write("norm_mean", torch::tensor(std::vector<double>(s.mean.begin(), s.mean.end()), torch::kFloat64));
  a.write("norm_std", torch::tensor(std::vector<double>(s.std.begin(), s.std.end()), torch::kFloat64));
  a.write("seed", c10::IValue(static_cast<std::int64_t>(model.seed())));
  a.write("channel_mask", model.channel_mask(), true);
  write_module(a, model.module());
  a.save_to(path.string());
}

ClassifierModel load_classifier(const std::filesystem::path& path) {
  auto a = open_archive(path, "classifier");
  ClassifierSpec s;
  s.arch = classifier_arch_from_string(read_string(a, "architecture_id"));
  s.num_classes = static_cast<int>(read_int(a, "num_classes"));
  s.width = static_cast<int>(read_int(a, "width"));
  s.dropout = read_double(a, "dropout");
  s.input = read_shape(a);
  torch::Tensor mean, sd, mask;
  a.read("norm_mean", mean);
  a.read("norm_std", sd);
  for (int i = 0; i < 3; ++i) {
    s.mean[i] = mean[i].item<double>();
    s.std[i] = sd[i].item<double>();
  }
  ClassifierModel model(s, static_cast<std::uint64_t>(read_int(a, "seed")));
  torch::Tensor probe;
  a.read("param/" + model.module().named_parameters(true).begin()->key(), probe);
  model.to(probe.scalar_type());
  read_module(a, model.module());
  a.read("channel_mask", mask, true);
  model.set_channel_mask(mask);
  return model;
}

void save_generator(const GeneratorModel& model, const std::filesystem::path& path) {
  torch::serialize::OutputArchive a;
  const auto& s = model.spec();
  a.write("kind", c10::IValue(std::string("generator")));
  a.write("architecture_id", c10::IValue(to_string(s.arch)));
  a.write("width", c10::IValue(static_cast<std::int64_t>(s.width)));
  a.write("epsilon", c10::IValue(s.epsilon));
  write_shape(a, s.input);
  a.write("seed", c10::IValue(static_cast<std::int64_t>(model.seed())));
  write_module(a, model.module());
  a.save_to(path.string());
}

GeneratorModel load_generator(const std::filesystem::path& path) {
  auto a = open_archive(path, "generator");
  GeneratorSpec s;
  s.arch = generator_arch_from_string(read_string(a, "architecture_id"));
  s.width = static_cast<int>(read_int(a, "width"));
  s.epsilon = read_double(a, "epsilon");
  s.input = read_shape(a);
  GeneratorModel model(s, static_cast<std::uint64_t>(read_int(a, "seed")));
  torch::Tensor probe;
  a.read("param/" + model.module().named_parameters(true).begin()->key(), probe);
  model.to(probe.scalar_type());
  read_module(a, model.module());
  return model;
}

std::string parameter_checksum(const torch::nn::Module& module) {
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
  auto feed = [&](const torch::Tensor& t) {
    auto c = t.detach().contiguous();
    EVP_DigestUpdate(ctx, c.data_ptr(), c.numel() * c.element_size());
  };
  for (const auto& p : module.parameters(true)) feed(p);
  for (const auto& b : module.buffers(true)) feed(b);
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, digest, &len);
  EVP_MD_CTX_free(ctx);
  std::ostringstream hex;
  for (unsigned int i = 0; i < len; ++i) hex << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
  return hex.str();
}

}  // namespace sslpoison
