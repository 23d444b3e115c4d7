#include "steerkit/sae_checkpoint.hpp"

#include "steerkit/errors.hpp"

namespace steerkit {

TensorContainer sae_to_container(const SaeParams& params) {
  TensorContainer c;
  c.add_scalar("meta.architecture", double(int(params.architecture)));
  c.add_scalar("meta.lambda", params.lambda);
  c.add_scalar("meta.target_l0", params.target_l0);

  switch (params.architecture) {
    case SaeArchitecture::ReLU:
      c.add_matrix("encoder.weight", params.w_enc);
      c.add_vector("encoder.bias", params.b_enc);
      c.add_matrix("decoder.weight", params.w_dec);
      c.add_vector("bias", params.b_dec);
      break;
    case SaeArchitecture::Gated:
      c.add_matrix("encoder.weight", params.w_enc);
      c.add_vector("gate_bias", params.gate_bias);
      c.add_matrix("decoder.weight", params.w_dec);
      c.add_vector("decoder_bias", params.b_dec);
      c.add_vector("r_mag", params.r_mag);
      c.add_vector("mag_bias", params.mag_bias);
      break;
    case SaeArchitecture::TopK:
    case SaeArchitecture::BatchTopK:
      c.add_matrix("encoder.weight", params.w_enc);
      c.add_vector("encoder.bias", params.b_enc);
      c.add_matrix("decoder.weight", params.w_dec);
      c.add_vector("b_dec", params.b_dec);
      c.add_scalar("k", double(params.k));
      if (params.inference_threshold)
        c.add_scalar("inference_threshold", *params.inference_threshold);
      break;
    case SaeArchitecture::JumpReLU:
      // Transposed orientation on disk.
      c.add_matrix("W_enc", params.w_enc.transpose());
      c.add_vector("b_enc", params.b_enc);
      c.add_matrix("W_dec", params.w_dec.transpose());
      c.add_vector("b_dec", params.b_dec);
      c.add_vector("threshold", params.threshold);
      break;
  }
  return c;
}

SaeParams sae_from_container(const TensorContainer& c) {
  SaeParams p;
  p.architecture = SaeArchitecture(int(c.get_scalar("meta.architecture")));
  p.lambda = c.get_scalar("meta.lambda");
  p.target_l0 = c.get_scalar("meta.target_l0");

  switch (p.architecture) {
    case SaeArchitecture::ReLU:
      p.w_enc = c.get_matrix("encoder.weight");
      p.b_enc = c.get_vector("encoder.bias");
      p.w_dec = c.get_matrix("decoder.weight");
      p.b_dec = c.get_vector("bias");
      break;
    case SaeArchitecture::Gated:
      p.w_enc = c.get_matrix("encoder.weight");
      p.gate_bias = c.get_vector("gate_bias");
      p.w_dec = c.get_matrix("decoder.weight");
      p.b_dec = c.get_vector("decoder_bias");
      p.r_mag = c.get_vector("r_mag");
      p.mag_bias = c.get_vector("mag_bias");
      break;
    case SaeArchitecture::TopK:
    case SaeArchitecture::BatchTopK:
      p.w_enc = c.get_matrix("encoder.weight");
      p.b_enc = c.get_vector("encoder.bias");
      p.w_dec = c.get_matrix("decoder.weight");
      p.b_dec = c.get_vector("b_dec");
      p.k = int(c.get_scalar("k"));
      if (c.has("inference_threshold"))
        p.inference_threshold = c.get_scalar("inference_threshold");
      break;
    case SaeArchitecture::JumpReLU:
      p.w_enc = c.get_matrix("W_enc").transpose();
      p.b_enc = c.get_vector("b_enc");
      p.w_dec = c.get_matrix("W_dec").transpose();
      p.b_dec = c.get_vector("b_dec");
      p.threshold = c.get_vector("threshold");
      break;
    default:
      throw FormatError("sae checkpoint: unknown architecture tag");
  }
  p.validate();
  return p;
}

void save_sae(const std::filesystem::path& path, const SaeParams& params) {
  write_container(path, sae_to_container(params));
}

SaeParams load_sae(const std::filesystem::path& path) {
  return sae_from_container(read_container(path));
}

}  // namespace steerkit
