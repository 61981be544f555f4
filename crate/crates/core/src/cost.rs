//! Money and compute accounting for tuning and inference.
//!
//! Currency amounts are exact decimals. The `*_raw` functions return
//! unrounded amounts so that totals can be rounded once, at the end.
//! Prices and GPU rates are always caller-supplied.

use rust_decimal::{Decimal, RoundingStrategy};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CostError {
    #[error("{0} must be non-negative")]
    Negative(&'static str),
    #[error("parameter count must be positive")]
    ZeroParameters,
}

/// Rounds to cents, half away from zero (half-up for the non-negative
/// amounts used here).
pub fn round_cents(amount: Decimal) -> Decimal {
    let mut r = amount.round_dp_with_strategy(2, RoundingStrategy::MidpointAwayFromZero);
    r.rescale(2);
    r
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GpuCostSpec {
    pub hours: Decimal,
    pub gpu_count: u32,
    pub rate_per_gpu_hour: Decimal,
}

impl GpuCostSpec {
    pub fn new(hours: Decimal, gpu_count: u32, rate_per_gpu_hour: Decimal) -> Result<Self, CostError> {
        if hours.is_sign_negative() && !hours.is_zero() {
            return Err(CostError::Negative("hours"));
        }
        if rate_per_gpu_hour.is_sign_negative() && !rate_per_gpu_hour.is_zero() {
            return Err(CostError::Negative("rate"));
        }
        Ok(Self {
            hours,
            gpu_count,
            rate_per_gpu_hour,
        })
    }
}

pub fn gpu_cost_raw(s: &GpuCostSpec) -> Decimal {
    s.hours * Decimal::from(s.gpu_count) * s.rate_per_gpu_hour
}

pub fn gpu_cost(s: &GpuCostSpec) -> Decimal {
    round_cents(gpu_cost_raw(s))
}

/// Token counts and prices per one million tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiCostSpec {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub price_in: Decimal,
    pub price_out: Decimal,
}

impl ApiCostSpec {
    pub fn new(
        prompt_tokens: u64,
        completion_tokens: u64,
        price_in: Decimal,
        price_out: Decimal,
    ) -> Result<Self, CostError> {
        for (name, p) in [("input price", price_in), ("output price", price_out)] {
            if p.is_sign_negative() && !p.is_zero() {
                return Err(CostError::Negative(name));
            }
        }
        Ok(Self {
            prompt_tokens,
            completion_tokens,
            price_in,
            price_out,
        })
    }
}

pub fn api_cost_raw(s: &ApiCostSpec) -> Decimal {
    let per_token = Decimal::from(1_000_000u32);
    (Decimal::from(s.prompt_tokens) * s.price_in + Decimal::from(s.completion_tokens) * s.price_out)
        / per_token
}

pub fn api_cost(s: &ApiCostSpec) -> Decimal {
    round_cents(api_cost_raw(s))
}

/// One row of a training/inference cost table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostRow {
    pub model: String,
    pub training: Decimal,
    pub inference: Decimal,
    pub total: Decimal,
}

impl CostRow {
    /// Takes unrounded amounts; the total is the rounded sum of the raw amounts.
    pub fn new(model: impl Into<String>, training_raw: Decimal, inference_raw: Decimal) -> Self {
        Self {
            model: model.into(),
            training: round_cents(training_raw),
            inference: round_cents(inference_raw),
            total: round_cents(training_raw + inference_raw),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub name: String,
    pub parameter_count: u64,
    pub sequence_length: u64,
}

impl ArchSpec {
    pub fn new(name: impl Into<String>, parameter_count: u64, sequence_length: u64) -> Result<Self, CostError> {
        if parameter_count == 0 {
            return Err(CostError::ZeroParameters);
        }
        Ok(Self {
            name: name.into(),
            parameter_count,
            sequence_length,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Compute {
    pub flops: u128,
    pub macs: u128,
}

/// Dense forward-pass approximation: one multiply-accumulate per parameter
/// per token, two floating-point operations per MAC. Attention-score terms
/// are not counted.
pub fn flops_macs(a: &ArchSpec) -> Compute {
    let macs = u128::from(a.parameter_count) * u128::from(a.sequence_length);
    Compute {
        flops: 2 * macs,
        macs,
    }
}

/// `2.81E+12` style: two decimals of mantissa, signed two-digit exponent.
pub fn format_sci(x: u128) -> String {
    if x == 0 {
        return "0.00E+00".into();
    }
    let s = format!("{:.2e}", x as f64);
    let (mantissa, exp) = s.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    format!("{mantissa}E{}{:02}", if exp < 0 { '-' } else { '+' }, exp.abs())
}
