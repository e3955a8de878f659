// SPDX-License-Identifier: Apache-2.0
#include "lungpipe/volume.hpp"

namespace lungpipe {

const char* to_string(NoduleLabel label) {
  return label == NoduleLabel::kMalignant ? "malignant" : "benign";
}

}  // namespace lungpipe
