#include <mutex>
#include <sstream>

#include "sslpoison/model_zoo.hpp"

namespace nn = torch::nn;

namespace sslpoison {

namespace {

// Weight initialisation draws from torch's global generator; serialise
// construction so seeded builds cannot interleave.
std::mutex& init_mutex() {
  static std::mutex m;
  return m;
}

nn::Conv2d conv(int in, int out, int k, int stride = 1, int pad = -1, bool bias = true) {
  return nn::Conv2d(nn::Conv2dOptions(in, out, k).stride(stride).padding(pad < 0 ? k / 2 : pad).bias(bias));
}

/// conv3x3-BN-ReLU x3 blocks with 2x downsampling between them.
class SmallCnn : public ClassifierNet {
 public:
  SmallCnn(int channels, int width, int classes, double dropout)
      : c1_(register_module("c1", conv(channels, width, 3))),
        b1_(register_module("b1", nn::BatchNorm2d(width))),
        c2_(register_module("c2", conv(width, 2 * width, 3))),
        b2_(register_module("b2", nn::BatchNorm2d(2 * width))),
        c3_(register_module("c3", conv(2 * width, 4 * width, 3))),
        b3_(register_module("b3", nn::BatchNorm2d(4 * width))),
        drop_(register_module("drop", nn::Dropout(dropout))),
        fc_(register_module("fc", nn::Linear(4 * width, classes))),
        channels_(4 * width) {}

  torch::Tensor features(const torch::Tensor& x) override {
    auto h = torch::max_pool2d(torch::relu(b1_(c1_(x))), 2);
    h = torch::max_pool2d(torch::relu(b2_(c2_(h))), 2);
    return torch::relu(b3_(c3_(h)));
  }
  torch::Tensor hidden(const torch::Tensor& fm) override { return fm.mean({2, 3}); }
  torch::Tensor head(const torch::Tensor& fm) override { return fc_(drop_(hidden(fm))); }
  int last_block_channels() const override { return channels_; }

 private:
  nn::Conv2d c1_;
  nn::BatchNorm2d b1_;
  nn::Conv2d c2_;
  nn::BatchNorm2d b2_;
  nn::Conv2d c3_;
  nn::BatchNorm2d b3_;
  nn::Dropout drop_;
  nn::Linear fc_;
  int channels_;
};

/// Conv-BN-LeakyReLU(0.1).
class ConvBnAct : public nn::Module {
 public:
  ConvBnAct(int in, int out, int k, int pad)
      : conv_(register_module("conv", conv(in, out, k, 1, pad))),
        bn_(register_module("bn", nn::BatchNorm2d(out))) {}
  torch::Tensor forward(const torch::Tensor& x) { return torch::leaky_relu(bn_(conv_(x)), 0.1); }

 private:
  nn::Conv2d conv_;
  nn::BatchNorm2d bn_;
};

/// The 13-layer ConvNet common in consistency-regularisation work.
class Cnn13 : public ClassifierNet {
 public:
  Cnn13(int channels, int classes, double dropout) {
    const int spec[9][4] = {{channels, 128, 3, 1}, {128, 128, 3, 1}, {128, 128, 3, 1},
                            {128, 256, 3, 1},      {256, 256, 3, 1}, {256, 256, 3, 1},
                            {256, 512, 3, 0},      {512, 256, 1, 0}, {256, 128, 1, 0}};
    for (int i = 0; i < 9; ++i) {
      layers_.push_back(register_module("l" + std::to_string(i),
                                        std::make_shared<ConvBnAct>(spec[i][0], spec[i][1], spec[i][2], spec[i][3])));
    }
    drop1_ = register_module("drop1", nn::Dropout(0.5));
    drop2_ = register_module("drop2", nn::Dropout(0.5));
    drop_ = register_module("drop", nn::Dropout(dropout));
    fc_ = register_module("fc", nn::Linear(128, classes));
  }

  torch::Tensor features(const torch::Tensor& x) override {
    auto h = x;
    for (int i = 0; i < 3; ++i) h = layers_[i]->forward(h);
    h = drop1_(torch::max_pool2d(h, 2));
    for (int i = 3; i < 6; ++i) h = layers_[i]->forward(h);
    h = drop2_(torch::max_pool2d(h, 2));
    for (int i = 6; i < 9; ++i) h = layers_[i]->forward(h);
    return h;
  }
  torch::Tensor hidden(const torch::Tensor& fm) override { return fm.mean({2, 3}); }
  torch::Tensor head(const torch::Tensor& fm) override { return fc_(drop_(hidden(fm))); }
  int last_block_channels() const override { return 128; }

 private:
  std::vector<std::shared_ptr<ConvBnAct>> layers_;
  nn::Dropout drop1_{nullptr}, drop2_{nullptr}, drop_{nullptr};
  nn::Linear fc_{nullptr};
};

class WideBasic : public nn::Module {
 public:
  WideBasic(int in, int out, int stride)
      : bn1_(register_module("bn1", nn::BatchNorm2d(in))),
        conv1_(register_module("conv1", conv(in, out, 3, stride, 1, false))),
        bn2_(register_module("bn2", nn::BatchNorm2d(out))),
        conv2_(register_module("conv2", conv(out, out, 3, 1, 1, false))) {
    if (in != out || stride != 1) shortcut_ = register_module("shortcut", conv(in, out, 1, stride, 0, false));
  }

  torch::Tensor forward(const torch::Tensor& x) {
    auto pre = torch::leaky_relu(bn1_(x), 0.1);
    auto h = conv1_(pre);
    h = conv2_(torch::leaky_relu(bn2_(h), 0.1));
    return h + (shortcut_ ? shortcut_(pre) : x);
  }

 private:
  nn::BatchNorm2d bn1_;
  nn::Conv2d conv1_;
  nn::BatchNorm2d bn2_;
  nn::Conv2d conv2_;
  nn::Conv2d shortcut_{nullptr};
};

/// WideResNet-28-2 (pre-activation, 4 blocks per group, widths 32/64/128).
class WideResNet : public ClassifierNet {
 public:
  WideResNet(int channels, int classes, double dropout) {
    stem_ = register_module("stem", conv(channels, 16, 3, 1, 1, false));
    const int widths[3] = {32, 64, 128};
    int in = 16;
    for (int g = 0; g < 3; ++g) {
      for (int b = 0; b < 4; ++b) {
        auto blk = std::make_shared<WideBasic>(in, widths[g], (b == 0 && g > 0) ? 2 : 1);
        blocks_.push_back(register_module("g" + std::to_string(g) + "b" + std::to_string(b), blk));
        in = widths[g];
      }
    }
    bn_ = register_module("bn", nn::BatchNorm2d(128));
    drop_ = register_module("drop", nn::Dropout(dropout));
    fc_ = register_module("fc", nn::Linear(128, classes));
  }

  torch::Tensor features(const torch::Tensor& x) override {
    auto h = stem_(x);
    for (auto& b : blocks_) h = b->forward(h);
    return torch::leaky_relu(bn_(h), 0.1);
  }
  torch::Tensor hidden(const torch::Tensor& fm) override { return fm.mean({2, 3}); }
  torch::Tensor head(const torch::Tensor& fm) override { return fc_(drop_(hidden(fm))); }
  int last_block_channels() const override { return 128; }

 private:
  nn::Conv2d stem_{nullptr};
  std::vector<std::shared_ptr<WideBasic>> blocks_;
  nn::BatchNorm2d bn_{nullptr};
  nn::Dropout drop_{nullptr};
  nn::Linear fc_{nullptr};
};

class LeNet : public ClassifierNet {
 public:
  LeNet(int channels, int side, int classes)
      : c1_(register_module("c1", conv(channels, 6, 5, 1, 0))),
        c2_(register_module("c2", conv(6, 16, 5, 1, 0))),
        flat_(16 * pooled_side(side) * pooled_side(side)),
        f1_(register_module("f1", nn::Linear(flat_, 120))),
        f2_(register_module("f2", nn::Linear(120, 84))),
        f3_(register_module("f3", nn::Linear(84, classes))) {}

  torch::Tensor features(const torch::Tensor& x) override {
    auto h = torch::max_pool2d(torch::relu(c1_(x)), 2);
    return torch::relu(c2_(h));
  }
  torch::Tensor hidden(const torch::Tensor& fm) override {
    auto h = torch::max_pool2d(fm, 2).flatten(1);
    return torch::relu(f2_(torch::relu(f1_(h))));
  }
  torch::Tensor head(const torch::Tensor& fm) override { return f3_(hidden(fm)); }
  int last_block_channels() const override { return 16; }

 private:
  static int pooled_side(int side) { return ((side - 4) / 2 - 4) / 2; }

  nn::Conv2d c1_, c2_;
  int flat_;
  nn::Linear f1_, f2_, f3_;
};

std::shared_ptr<ClassifierNet> build(const ClassifierSpec& s) {
  const int c = s.input.channels;
  switch (s.arch) {
    case ClassifierArch::small_cnn: return std::make_shared<SmallCnn>(c, s.width, s.num_classes, s.dropout);
    case ClassifierArch::cnn13: return std::make_shared<Cnn13>(c, s.num_classes, s.dropout);
    case ClassifierArch::wrn28_2: return std::make_shared<WideResNet>(c, s.num_classes, s.dropout);
    case ClassifierArch::lenet: return std::make_shared<LeNet>(c, s.input.height, s.num_classes);
  }
  throw ModelError("unknown classifier architecture");
}

std::string shape_string(const ImageShape& s) {
  std::ostringstream os;
  os << "[N, " << s.channels << ", " << s.height << ", " << s.width << "]";
  return os.str();
}

}  // namespace

std::string to_string(ClassifierArch arch) {
  switch (arch) {
    case ClassifierArch::small_cnn: return "small-cnn";
    case ClassifierArch::cnn13: return "cnn13";
    case ClassifierArch::wrn28_2: return "wrn-28-2";
    case ClassifierArch::lenet: return "lenet";
  }
  return "?";
}

ClassifierArch classifier_arch_from_string(const std::string& s) {
  if (s == "small-cnn") return ClassifierArch::small_cnn;
  if (s == "cnn13") return ClassifierArch::cnn13;
  if (s == "wrn-28-2" || s == "wideresnet-28-2") return ClassifierArch::wrn28_2;
  if (s == "lenet") return ClassifierArch::lenet;
  throw ModelError("unknown classifier architecture: " + s);
}

ClassifierModel::ClassifierModel(ClassifierSpec spec, std::uint64_t seed)
    : spec_(std::move(spec)), seed_(seed) {
  if (spec_.num_classes < 2) throw ModelError("classifier needs at least 2 classes");
  if (spec_.input.channels != 1 && spec_.input.channels != 3) {
    throw ModelError("classifier input must have 1 or 3 channels");
  }
  std::lock_guard lock(init_mutex());
  torch::manual_seed(seed_);
  net_ = build(spec_);
  mask_ = torch::ones({net_->last_block_channels()});
}

void ClassifierModel::check_input(const torch::Tensor& pixels) const {
  if (pixels.dim() != 4 || pixels.size(1) != spec_.input.channels || pixels.size(2) != spec_.input.height ||
      pixels.size(3) != spec_.input.width) {
    std::ostringstream os;
    os << "classifier input shape " << pixels.sizes() << " does not match expected "
       << shape_string(spec_.input);
    throw ModelError(os.str());
  }
}

torch::Tensor ClassifierModel::normalize(const torch::Tensor& pixels) const {
  const int c = spec_.input.channels;
  auto opts = torch::TensorOptions().dtype(pixels.scalar_type());
  auto mean = torch::tensor(std::vector<double>(spec_.mean.begin(), spec_.mean.begin() + c), opts);
  auto sd = torch::tensor(std::vector<double>(spec_.std.begin(), spec_.std.begin() + c), opts);
  return (pixels / 255.0 - mean.view({1, c, 1, 1})) / sd.view({1, c, 1, 1});
}

torch::Tensor ClassifierModel::logits(const torch::Tensor& pixels) const {
  check_input(pixels);
  auto fm = net_->features(normalize(pixels));
  fm = fm * mask_.to(fm.scalar_type()).view({1, -1, 1, 1});
  return net_->head(fm);
}

torch::Tensor ClassifierModel::forward(const torch::Tensor& pixels) const {
  return torch::softmax(logits(pixels), 1);
}

torch::Tensor ClassifierModel::hidden(const torch::Tensor& pixels) const {
  check_input(pixels);
  auto fm = net_->features(normalize(pixels));
  fm = fm * mask_.to(fm.scalar_type()).view({1, -1, 1, 1});
  return net_->hidden(fm);
}

torch::Tensor ClassifierModel::channel_activations(const torch::Tensor& pixels) const {
  check_input(pixels);
  return net_->features(normalize(pixels)).mean({0, 2, 3});
}

void ClassifierModel::set_channel_mask(const torch::Tensor& mask) {
  if (mask.dim() != 1 || mask.size(0) != net_->last_block_channels()) {
    throw ModelError("channel mask must have " + std::to_string(net_->last_block_channels()) + " entries");
  }
  mask_ = mask.detach().clone();
}

std::int64_t ClassifierModel::parameter_count() const {
  std::int64_t n = 0;
  for (const auto& p : net_->parameters()) n += p.numel();
  return n;
}

void ClassifierModel::to(torch::Dtype dtype) {
  net_->to(dtype);
  mask_ = mask_.to(dtype);
}

torch::Dtype ClassifierModel::dtype() const {
  return net_->parameters().front().scalar_type();
}

ClassifierModel ClassifierModel::clone() const {
  ClassifierModel copy(spec_, seed_);
  copy.to(dtype());
  copy.load_state_from(*this);
  copy.mask_ = mask_.clone();
  copy.train(is_training());
  return copy;
}

void ClassifierModel::load_state_from(const ClassifierModel& other) {
  torch::NoGradGuard guard;
  auto dst = net_->named_parameters(true);
  auto src = other.net_->named_parameters(true);
  for (const auto& item : src) dst[item.key()].copy_(item.value());
  auto dst_b = net_->named_buffers(true);
  auto src_b = other.net_->named_buffers(true);
  for (const auto& item : src_b) dst_b[item.key()].copy_(item.value());
  mask_ = other.mask_.clone();
}

torch::Tensor forward_classifier(const ClassifierModel& model, const torch::Tensor& batch) {
  const bool was_training = model.is_training();
  model.train(false);
  torch::NoGradGuard guard;
  auto probs = model.forward(batch);
  model.train(was_training);
  return probs;
}

torch::Tensor predict_probabilities(const ClassifierModel& model, const torch::Tensor& pixels, int chunk) {
  const bool was_training = model.is_training();
  model.train(false);
  torch::NoGradGuard guard;
  std::vector<torch::Tensor> parts;
  for (std::int64_t i = 0; i < pixels.size(0); i += chunk) {
    parts.push_back(model.forward(pixels.slice(0, i, std::min<std::int64_t>(i + chunk, pixels.size(0)))));
  }
  model.train(was_training);
  if (parts.empty()) return torch::empty({0, model.spec().num_classes}, pixels.options());
  return torch::cat(parts, 0);
}

torch::Tensor flat_loss_gradient(const ClassifierModel& model, const torch::Tensor& pixels,
                                 const torch::Tensor& labels, const std::vector<torch::Tensor>& params,
                                 bool create_graph) {
  auto loss = torch::cross_entropy_loss(model.logits(pixels), labels);
  auto grads = torch::autograd::grad({loss}, params, {}, create_graph, create_graph, true);
  std::vector<torch::Tensor> flat;
  flat.reserve(grads.size());
  for (std::size_t i = 0; i < grads.size(); ++i) {
    flat.push_back(grads[i].defined() ? grads[i].reshape({-1}) : torch::zeros({params[i].numel()}, params[i].options()));
  }
  return torch::cat(flat);
}

}  // namespace sslpoison
