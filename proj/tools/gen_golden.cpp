// Regenerates the golden fixture files under tests/data/golden/. The files
// are committed; this tool exists so they can be rebuilt deterministically
// if the formats ever rev. Usage: gen_golden <output-dir>

#include <iostream>
#include <string>

#include "fixq/fixq.hpp"

int main(int argc, char** argv) {
  if (argc != 2) {
    std::cerr << "usage: gen_golden <output-dir>\n";
    return 1;
  }
  const std::string dir = argv[1];

  const fixq::NetDescriptor net = fixq::build_pattern_net(
      true, fixq::FixedPointFormat(2, 14), fixq::FixedPointFormat(8, 8));
  fixq::Model model = fixq::init_model(net, 0x901dULL);
  model.provenance = "golden fixture, seed=0x901d";

  fixq::BitAllocation alloc;
  alloc.total_bits = 16;
  alloc.loss_threshold = 0;
  for (std::size_t i : fixq::weighted_layers(net))
    alloc.layers.push_back({net.layers[i].name, net.layers[i].quant.weight_fmt,
                            net.layers[i].quant.act_fmt});

  fixq::save_model(model, dir + "/pattern4.fxqm");
  fixq::export_accelerator(model, alloc, dir + "/pattern4.fxqx");
  std::cout << "wrote " << dir << "/pattern4.fxqm and " << dir << "/pattern4.fxqx\n";
  return 0;
}
