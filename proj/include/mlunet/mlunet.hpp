#pragma once

#include "mlunet/tensor.hpp"
#include "mlunet/ops.hpp"
#include "mlunet/params.hpp"
#include "mlunet/gradcheck.hpp"
#include "mlunet/ssm.hpp"
#include "mlunet/blocks.hpp"
#include "mlunet/net.hpp"
#include "mlunet/checkpoint.hpp"
#include "mlunet/loss.hpp"
#include "mlunet/metrics.hpp"
#include "mlunet/image_io.hpp"
#include "mlunet/data_io.hpp"
#include "mlunet/trainer.hpp"
#include "mlunet/cli.hpp"
