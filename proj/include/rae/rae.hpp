#pragma once

#include "rae/binary_io.hpp"
#include "rae/codec.hpp"
#include "rae/config.hpp"
#include "rae/data.hpp"
#include "rae/error.hpp"
#include "rae/latent.hpp"
#include "rae/nn.hpp"
#include "rae/tensor.hpp"
#include "rae/train.hpp"
