use serde::{Deserialize, Serialize};

use super::labels;
use super::{FunctionStats, ProfilerError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Crypto,
    Networking,
    Other,
}

impl Category {
    pub fn as_str(self) -> &'static str {
        match self {
            Category::Crypto => "crypto",
            Category::Networking => "networking",
            Category::Other => "other",
        }
    }
}

impl std::fmt::Display for Category {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Maps labels to the crypto and networking sets. Anything unlisted is other.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Taxonomy {
    pub crypto: Vec<String>,
    pub networking: Vec<String>,
}

impl Default for Taxonomy {
    fn default() -> Self {
        Taxonomy {
            crypto: [
                labels::ENCRYPT_STR,
                labels::DECRYPT_STR,
                labels::ENCODE_ADDRESS,
                labels::DECODE_ADDRESS,
                labels::CRYPTO_OUT,
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
            networking: [labels::SEND_PACKET, labels::RELAY_PACKET]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        }
    }
}

impl Taxonomy {
    /// The default sets plus the synthetic crypto and send stage labels.
    pub fn with_synthetic_stages() -> Self {
        let mut t = Taxonomy::default();
        t.crypto.push(labels::SYNTHETIC_CRYPTO.to_string());
        t.networking.push(labels::SYNTHETIC_SEND.to_string());
        t
    }

    pub fn category_of(&self, label: &str) -> Category {
        if self.crypto.iter().any(|l| l == label) {
            Category::Crypto
        } else if self.networking.iter().any(|l| l == label) {
            Category::Networking
        } else {
            Category::Other
        }
    }
}

/// Share of exclusive time per function set for one node role.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CategoryBreakdown {
    pub crypto_fraction: f64,
    pub networking_fraction: f64,
    pub other_fraction: f64,
    pub crypto_ns: u64,
    pub networking_ns: u64,
    pub other_ns: u64,
    /// False when there was no recorded time to normalize by.
    pub fractions_defined: bool,
}

impl CategoryBreakdown {
    /// A breakdown built directly from fractions, with no absolute totals.
    pub fn from_fractions(crypto: f64, networking: f64, other: f64) -> Self {
        CategoryBreakdown {
            crypto_fraction: crypto,
            networking_fraction: networking,
            other_fraction: other,
            crypto_ns: 0,
            networking_ns: 0,
            other_ns: 0,
            fractions_defined: crypto + networking + other > 0.0,
        }
    }

    pub fn total_ns(&self) -> u64 {
        self.crypto_ns + self.networking_ns + self.other_ns
    }

    pub fn fraction(&self, category: Category) -> f64 {
        match category {
            Category::Crypto => self.crypto_fraction,
            Category::Networking => self.networking_fraction,
            Category::Other => self.other_fraction,
        }
    }
}

pub fn categorize(stats: &[FunctionStats], taxonomy: &Taxonomy) -> CategoryBreakdown {
    let mut totals = [0u64; 3];
    for s in stats {
        let slot = match taxonomy.category_of(&s.label) {
            Category::Crypto => 0,
            Category::Networking => 1,
            Category::Other => 2,
        };
        totals[slot] += s.exclusive_ns;
    }
    let grand: u64 = totals.iter().sum();
    let (fractions, defined) = if grand > 0 {
        let g = grand as f64;
        (
            [totals[0] as f64 / g, totals[1] as f64 / g, totals[2] as f64 / g],
            true,
        )
    } else {
        ([0.0; 3], false)
    };
    CategoryBreakdown {
        crypto_fraction: fractions[0],
        networking_fraction: fractions[1],
        other_fraction: fractions[2],
        crypto_ns: totals[0],
        networking_ns: totals[1],
        other_ns: totals[2],
        fractions_defined: defined,
    }
}

/// Perfect-overlap bound for splitting work into a crypto stage and a
/// networking stage running concurrently: the shorter stage hides entirely
/// behind the longer one, so the saving is `min(crypto, net) / total`.
/// The result lies in `[0, 0.5]`.
pub fn estimate_pipeline_speedup(breakdown: &CategoryBreakdown) -> Result<f64, ProfilerError> {
    let c = breakdown.crypto_fraction;
    let n = breakdown.networking_fraction;
    let total = c + n + breakdown.other_fraction;
    if !breakdown.fractions_defined || total <= 0.0 {
        return Err(ProfilerError::UndefinedEstimate);
    }
    Ok(c.min(n) / total)
}
