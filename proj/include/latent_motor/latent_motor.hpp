#pragma once

#include "latent_motor/adaptation.hpp"
#include "latent_motor/analysis.hpp"
#include "latent_motor/checkpoint.hpp"
#include "latent_motor/config.hpp"
#include "latent_motor/embedding.hpp"
#include "latent_motor/env.hpp"
#include "latent_motor/error.hpp"
#include "latent_motor/nn.hpp"
#include "latent_motor/parallel.hpp"
#include "latent_motor/replay.hpp"
#include "latent_motor/rng.hpp"
#include "latent_motor/sac.hpp"
