//! Counter-based random streams keyed by experiment seed, role, cycle and
//! member, so any single member's noise is reproducible in isolation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Numerical,
    DataDriven,
    Observation,
    ObservationEnsemble,
    Truth,
    Climatology,
    Training,
}

impl Role {
    fn tag(self) -> u64 {
        match self {
            Role::Numerical => 1,
            Role::DataDriven => 2,
            Role::Observation => 3,
            Role::ObservationEnsemble => 4,
            Role::Truth => 5,
            Role::Climatology => 6,
            Role::Training => 7,
        }
    }
}

/// Identifies one member's stream; `member` is filled in per draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StreamKey {
    pub seed: u64,
    pub role: Role,
    pub cycle: u32,
}

impl StreamKey {
    pub fn new(seed: u64, role: Role, cycle: u32) -> Self {
        StreamKey { seed, role, cycle }
    }

    /// Stream word: role in the top byte, cycle below it, member in the low 28 bits.
    pub fn stream(&self, member: u32) -> u64 {
        assert!(member < 1 << 28, "member index {member} exceeds the stream layout");
        (self.role.tag() << 56) | ((self.cycle as u64 & 0x0fff_ffff) << 28) | member as u64
    }

    pub fn rng(&self, member: u32) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream(member));
        rng
    }

    /// Adds `sigma * N(0, 1)` noise to every value from member `member`'s stream.
    pub fn add_noise(&self, member: u32, sigma: f64, values: &mut [f64]) {
        if sigma == 0.0 {
            return;
        }
        let mut rng = self.rng(member);
        for v in values.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += sigma * z;
        }
    }
}
