#pragma once

#include "chybrid/augment.hpp"
#include "chybrid/config.hpp"
#include "chybrid/conformer.hpp"
#include "chybrid/corpus.hpp"
#include "chybrid/frontend.hpp"
#include "chybrid/heads.hpp"
#include "chybrid/model.hpp"
#include "chybrid/ops.hpp"
#include "chybrid/optim.hpp"
#include "chybrid/param_store.hpp"
#include "chybrid/tensor.hpp"
#include "chybrid/trainer.hpp"
