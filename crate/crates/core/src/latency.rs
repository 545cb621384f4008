//! Analytical prefill/decode latency of generating one item, and the speedup
//! of single-token item encodings over multi-token ones.
//!
//! Generic over the numeric type so that the built-in profiles can be
//! evaluated exactly with rationals as well as in floating point.

use std::collections::BTreeMap;
use std::fmt::Debug;
use std::io::Write;
use std::ops::{Add, Div, Mul, Sub};

use num_rational::Ratio;
use num_traits::{ToPrimitive, Zero};
use serde::{Deserialize, Serialize};

use crate::catalog::{Catalog, Vocab};
use crate::error::{Error, Result};

/// Numeric type for latency arithmetic.
pub trait LatencyScalar:
    Clone + Debug + PartialOrd + Zero + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Div<Output = Self>
{
    fn from_ratio(r: Ratio<i64>) -> Self;
    fn from_u64(v: u64) -> Self;
    fn to_f64(&self) -> f64;
}

impl LatencyScalar for f64 {
    fn from_ratio(r: Ratio<i64>) -> Self {
        *r.numer() as f64 / *r.denom() as f64
    }

    fn from_u64(v: u64) -> Self {
        v as f64
    }

    fn to_f64(&self) -> f64 {
        *self
    }
}

impl LatencyScalar for Ratio<i64> {
    fn from_ratio(r: Ratio<i64>) -> Self {
        r
    }

    fn from_u64(v: u64) -> Self {
        Ratio::from_integer(v as i64)
    }

    fn to_f64(&self) -> f64 {
        ToPrimitive::to_f64(self).unwrap_or(f64::NAN)
    }
}

/// Prefill latency as a function of prompt length.
#[derive(Debug, Clone, PartialEq)]
pub enum Prefill<S> {
    /// `n · slope` milliseconds.
    Linear(S),
    /// Piecewise-linear through `(tokens, ms)` points sorted by tokens,
    /// starting from `(0, 0)` and extrapolated with the last segment's slope.
    Table(Vec<(u64, S)>),
}

impl<S: LatencyScalar> Prefill<S> {
    pub fn latency(&self, n: &S) -> S {
        match self {
            Prefill::Linear(slope) => n.clone() * slope.clone(),
            Prefill::Table(points) => {
                let mut prev = (S::zero(), S::zero());
                for (i, (x, y)) in points.iter().enumerate() {
                    let x = S::from_u64(*x);
                    let last = i + 1 == points.len();
                    if *n <= x || last {
                        let span = x.clone() - prev.0.clone();
                        if span.is_zero() {
                            return y.clone();
                        }
                        return prev.1.clone() + (n.clone() - prev.0.clone()) * (y.clone() - prev.1.clone()) / span;
                    }
                    prev = (x, y.clone());
                }
                S::zero()
            }
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            Prefill::Linear(s) if *s < S::zero() => Err(Error::InvalidArgument("negative prefill slope".into())),
            Prefill::Table(points) => {
                let mut prev = (0u64, S::zero());
                for (x, y) in points {
                    if *x <= prev.0 && !(prev.0 == 0 && *x > 0) || *y < prev.1 {
                        return Err(Error::InvalidArgument("prefill table must be strictly increasing in tokens and monotone in ms".into()));
                    }
                    prev = (*x, y.clone());
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeploymentProfile<S> {
    pub name: String,
    /// Milliseconds per decode step.
    pub l_decode: S,
    pub prefill: Prefill<S>,
    /// Constants back-solved from end-to-end totals rather than measured.
    pub back_solved: bool,
}

impl<S: LatencyScalar> DeploymentProfile<S> {
    pub fn linear(name: impl Into<String>, l_decode: S, l_prefill: S) -> Result<Self> {
        let p = Self {
            name: name.into(),
            l_decode,
            prefill: Prefill::Linear(l_prefill),
            back_solved: false,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.l_decode < S::zero() {
            return Err(Error::InvalidArgument(format!("{}: negative decode latency", self.name)));
        }
        self.prefill.validate()
    }
}

/// Prompt shape for one recommendation request.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodingSpec<S> {
    /// Tokens per item.
    pub m: S,
    /// Non-item prompt tokens.
    pub constant: S,
    /// History length in items.
    pub h_len: S,
}

impl<S: LatencyScalar> EncodingSpec<S> {
    pub fn new(m: S, h_len: S, constant: S) -> Result<Self> {
        let one = S::from_u64(1);
        if m < one || h_len < one || constant < S::zero() {
            return Err(Error::InvalidArgument("encoding spec needs m >= 1, |H| >= 1, const >= 0".into()));
        }
        Ok(Self { m, constant, h_len })
    }

    pub fn from_counts(m: u64, h_len: u64, constant: u64) -> Result<Self> {
        Self::new(S::from_u64(m), S::from_u64(h_len), S::from_u64(constant))
    }

    pub fn prefill_tokens(&self) -> S {
        self.m.clone() * self.h_len.clone() + self.constant.clone()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatencyBreakdown<S> {
    pub prefill: S,
    pub decode: S,
    pub total: S,
}

pub fn latency_breakdown<S: LatencyScalar>(profile: &DeploymentProfile<S>, spec: &EncodingSpec<S>) -> LatencyBreakdown<S> {
    let prefill = profile.prefill.latency(&spec.prefill_tokens());
    let decode = spec.m.clone() * profile.l_decode.clone();
    LatencyBreakdown {
        total: prefill.clone() + decode.clone(),
        prefill,
        decode,
    }
}

/// `m · l_decode + l_prefill(m · |H| + const)`.
pub fn total_latency<S: LatencyScalar>(profile: &DeploymentProfile<S>, spec: &EncodingSpec<S>) -> S {
    latency_breakdown(profile, spec).total
}

pub fn speedup<S: LatencyScalar>(profile: &DeploymentProfile<S>, multi: &EncodingSpec<S>, single: &EncodingSpec<S>) -> S {
    total_latency(profile, multi) / total_latency(profile, single)
}

/// `(lower, upper)` over all linear profiles: the ratio of prefill lengths and
/// the ratio of decode steps, in ascending order.
pub fn speedup_bounds<S: LatencyScalar>(multi: &EncodingSpec<S>, single: &EncodingSpec<S>) -> (S, S) {
    let decode_ratio = multi.m.clone() / single.m.clone();
    let prefill_ratio = multi.prefill_tokens() / single.prefill_tokens();
    if prefill_ratio <= decode_ratio {
        (prefill_ratio, decode_ratio)
    } else {
        (decode_ratio, prefill_ratio)
    }
}

/// How an item is written into the prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ItemEncoding {
    Id,
    Title,
    Category,
}

impl ItemEncoding {
    pub fn as_str(self) -> &'static str {
        match self {
            ItemEncoding::Id => "id",
            ItemEncoding::Title => "title",
            ItemEncoding::Category => "category",
        }
    }
}

impl std::str::FromStr for ItemEncoding {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "id" => Ok(ItemEncoding::Id),
            "title" => Ok(ItemEncoding::Title),
            "category" => Ok(ItemEncoding::Category),
            other => Err(Error::InvalidArgument(format!("unknown encoder `{other}` (expected id|title|category)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenCounts {
    pub encoding: ItemEncoding,
    /// tokens per item -> number of items
    pub histogram: BTreeMap<usize, usize>,
    pub mean: f64,
    pub n_items: usize,
    /// Items lacking the encoded field, excluded from the histogram.
    pub missing: usize,
}

/// Tokens per item under `encoding`, using the artifact vocabulary's tokenizer.
pub fn measure_m(catalog: &Catalog, vocab: &Vocab, encoding: ItemEncoding) -> Result<TokenCounts> {
    let mut histogram = BTreeMap::new();
    let mut missing = 0;
    let mut total = 0usize;
    for rec in catalog.items() {
        let count = match encoding {
            ItemEncoding::Id => Some(1),
            ItemEncoding::Title => rec.title.as_deref().map(|t| vocab.encode(t).len()),
            ItemEncoding::Category => rec.category.as_deref().map(|t| vocab.encode(t).len()),
        };
        match count {
            Some(c) if c > 0 => {
                *histogram.entry(c).or_insert(0) += 1;
                total += c;
            }
            _ => missing += 1,
        }
    }
    let n_items = catalog.len() - missing;
    if n_items == 0 {
        return Err(Error::InvalidArgument(format!(
            "no item carries the `{}` field",
            encoding.as_str()
        )));
    }
    Ok(TokenCounts {
        encoding,
        histogram,
        mean: total as f64 / n_items as f64,
        n_items,
        missing,
    })
}

#[derive(Debug, Clone, Deserialize)]
struct RegistryFile {
    profiles: Vec<ProfileEntry>,
    reference_specs: Vec<SpecEntry>,
}

#[derive(Debug, Clone, Deserialize)]
struct ProfileEntry {
    name: String,
    l_decode_ms: String,
    prefill: PrefillEntry,
    #[serde(default)]
    back_solved: bool,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(rename_all = "snake_case")]
enum PrefillEntry {
    LinearMsPerToken(String),
    Table(Vec<(u64, String)>),
}

#[derive(Debug, Clone, Deserialize, Serialize, PartialEq)]
pub struct SpecEntry {
    pub profile: String,
    pub encoder: ItemEncoding,
    pub m: u64,
    pub h_len: u64,
    #[serde(rename = "const")]
    pub constant: u64,
}

/// Deployment profiles plus the prompt shapes they were calibrated against.
#[derive(Debug, Clone)]
pub struct ProfileRegistry<S> {
    pub profiles: Vec<DeploymentProfile<S>>,
    pub reference_specs: Vec<SpecEntry>,
}

const BUILTIN_PROFILES: &str = include_str!("../data/profiles.json");

fn parse_ratio(s: &str) -> Result<Ratio<i64>> {
    s.trim()
        .parse::<Ratio<i64>>()
        .map_err(|e| Error::Config(format!("bad rational `{s}`: {e}")))
}

impl<S: LatencyScalar> ProfileRegistry<S> {
    pub fn builtin() -> Self {
        Self::from_json(BUILTIN_PROFILES).expect("bundled profile registry parses")
    }

    /// Values are strings holding integers or fractions such as `"5/19"`.
    pub fn from_json(text: &str) -> Result<Self> {
        let file: RegistryFile = serde_json::from_str(text).map_err(|e| Error::Config(format!("profile registry: {e}")))?;
        let mut profiles = Vec::new();
        for p in file.profiles {
            let prefill = match p.prefill {
                PrefillEntry::LinearMsPerToken(s) => Prefill::Linear(S::from_ratio(parse_ratio(&s)?)),
                PrefillEntry::Table(points) => Prefill::Table(
                    points
                        .into_iter()
                        .map(|(n, ms)| Ok((n, S::from_ratio(parse_ratio(&ms)?))))
                        .collect::<Result<_>>()?,
                ),
            };
            let profile = DeploymentProfile {
                name: p.name,
                l_decode: S::from_ratio(parse_ratio(&p.l_decode_ms)?),
                prefill,
                back_solved: p.back_solved,
            };
            profile.validate()?;
            profiles.push(profile);
        }
        for s in &file.reference_specs {
            if !profiles.iter().any(|p| p.name == s.profile) {
                return Err(Error::Config(format!("reference spec names unknown profile `{}`", s.profile)));
            }
        }
        Ok(Self {
            profiles,
            reference_specs: file.reference_specs,
        })
    }

    pub fn get(&self, name: &str) -> Result<&DeploymentProfile<S>> {
        self.profiles.iter().find(|p| p.name == name).ok_or_else(|| {
            let known: Vec<&str> = self.profiles.iter().map(|p| p.name.as_str()).collect();
            Error::InvalidArgument(format!("unknown profile `{name}` (known: {})", known.join(", ")))
        })
    }

    pub fn reference_spec(&self, profile: &str, encoder: ItemEncoding) -> Option<EncodingSpec<S>> {
        self.reference_specs
            .iter()
            .find(|s| s.profile == profile && s.encoder == encoder)
            .and_then(|s| EncodingSpec::from_counts(s.m, s.h_len, s.constant).ok())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatencyRow {
    pub dataset: String,
    pub encoder: ItemEncoding,
    pub profile: String,
    pub prefill_ms: f64,
    pub decode_ms: f64,
    pub total_ms: f64,
    /// Total of this row over the single-token row for the same profile.
    pub speedup: f64,
}

pub const LATENCY_CSV_HEADER: &str = "dataset,encoder,profile,prefill_ms,decode_ms,total_ms,speedup";

/// Builds one row per encoding, with speedups relative to `single`.
pub fn latency_rows<S: LatencyScalar>(
    dataset: &str,
    profile: &DeploymentProfile<S>,
    single: &EncodingSpec<S>,
    specs: &[(ItemEncoding, EncodingSpec<S>)],
) -> Vec<LatencyRow> {
    let base = total_latency(profile, single);
    specs
        .iter()
        .map(|(enc, spec)| {
            let b = latency_breakdown(profile, spec);
            LatencyRow {
                dataset: dataset.to_string(),
                encoder: *enc,
                profile: profile.name.clone(),
                prefill_ms: b.prefill.to_f64(),
                decode_ms: b.decode.to_f64(),
                total_ms: b.total.to_f64(),
                speedup: (b.total / base.clone()).to_f64(),
            }
        })
        .collect()
}

pub fn write_latency_csv<W: Write>(rows: &[LatencyRow], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{LATENCY_CSV_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{:.4},{:.4},{:.4},{:.4}",
            r.dataset,
            r.encoder.as_str(),
            r.profile,
            r.prefill_ms,
            r.decode_ms,
            r.total_ms,
            r.speedup
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{ItemRecord, VocabConfig};
    use proptest::prelude::*;

    type Q = Ratio<i64>;

    fn q(n: i64, d: i64) -> Q {
        Ratio::new(n, d)
    }

    fn reference(reg: &ProfileRegistry<Q>, profile: &str) -> (LatencyBreakdown<Q>, LatencyBreakdown<Q>) {
        let p = reg.get(profile).unwrap();
        let id = reg.reference_spec(profile, ItemEncoding::Id).unwrap();
        let title = reg.reference_spec(profile, ItemEncoding::Title).unwrap();
        (latency_breakdown(p, &id), latency_breakdown(p, &title))
    }

    #[test]
    fn builtin_profiles_reproduce_headline_totals_exactly() {
        let reg = ProfileRegistry::<Q>::builtin();
        let (id, title) = reference(&reg, "mistral7b");
        assert_eq!((id.prefill, id.decode, id.total), (q(35, 1), q(20, 1), q(55, 1)));
        assert_eq!((title.prefill, title.decode, title.total), (q(75, 1), q(400, 1), q(475, 1)));
        let (id, title) = reference(&reg, "palm");
        assert_eq!((id.prefill, id.decode, id.total), (q(48, 1), q(20, 1), q(68, 1)));
        assert_eq!((title.prefill, title.decode, title.total), (q(96, 1), q(580, 1), q(676, 1)));
        assert!(reg.profiles.iter().all(|p| p.back_solved));
    }

    #[test]
    fn builtin_speedups_in_floating_point() {
        let reg = ProfileRegistry::<f64>::builtin();
        for (name, expect) in [("mistral7b", 475.0 / 55.0), ("palm", 676.0 / 68.0)] {
            let p = reg.get(name).unwrap();
            let s = speedup(
                p,
                &reg.reference_spec(name, ItemEncoding::Title).unwrap(),
                &reg.reference_spec(name, ItemEncoding::Id).unwrap(),
            );
            assert!((s - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn single_token_with_free_prefill_costs_one_decode() {
        let p = DeploymentProfile::linear("free", 7.0, 0.0).unwrap();
        let spec = EncodingSpec::from_counts(1, 10, 30).unwrap();
        assert_eq!(total_latency(&p, &spec), 7.0);
    }

    #[test]
    fn limits_of_the_closed_form() {
        let multi = EncodingSpec::<Q>::from_counts(12, 8, 20).unwrap();
        let single = EncodingSpec::<Q>::from_counts(1, 8, 20).unwrap();
        let no_prefill = DeploymentProfile::linear("p", q(3, 1), q(0, 1)).unwrap();
        assert_eq!(speedup(&no_prefill, &multi, &single), q(12, 1));
        let no_decode = DeploymentProfile::linear("d", q(0, 1), q(1, 7)).unwrap();
        assert_eq!(speedup(&no_decode, &multi, &single), q(116, 28));
        assert_eq!(speedup_bounds(&multi, &single), (q(116, 28), q(12, 1)));
        let one = EncodingSpec::<Q>::from_counts(1, 8, 20).unwrap();
        assert_eq!(speedup_bounds(&one, &single), (q(1, 1), q(1, 1)));
    }

    #[test]
    fn table_prefill_interpolates() {
        let p = Prefill::Table(vec![(100, 10.0), (200, 30.0)]);
        assert_eq!(p.latency(&50.0), 5.0);
        assert_eq!(p.latency(&150.0), 20.0);
        assert_eq!(p.latency(&300.0), 50.0);
        assert!(Prefill::Table(vec![(100, 10.0), (50, 30.0)]).validate().is_err());
        assert!(Prefill::Table(vec![(100, 10.0), (200, 5.0)]).validate().is_err());
    }

    #[test]
    fn registry_rejects_bad_entries() {
        assert!(ProfileRegistry::<f64>::from_json("{}").is_err());
        let bad = r#"{"profiles":[{"name":"x","l_decode_ms":"1/0x","prefill":{"linear_ms_per_token":"1"}}],"reference_specs":[]}"#;
        assert!(ProfileRegistry::<f64>::from_json(bad).is_err());
        let orphan = r#"{"profiles":[],"reference_specs":[{"profile":"y","encoder":"id","m":1,"h_len":1,"const":0}]}"#;
        assert!(ProfileRegistry::<f64>::from_json(orphan).is_err());
    }

    #[test]
    fn measure_m_counts_words() {
        let mut cat = Catalog::new();
        for (k, t) in [("a", Some("red pen")), ("b", Some("a big blue notebook")), ("c", None)] {
            let mut r = ItemRecord::new(k);
            r.title = t.map(String::from);
            cat.upsert(r);
        }
        let vocab = Vocab::build(&cat, VocabConfig::default()).unwrap();
        let id = measure_m(&cat, &vocab, ItemEncoding::Id).unwrap();
        assert_eq!((id.mean, id.n_items), (1.0, 3));
        let title = measure_m(&cat, &vocab, ItemEncoding::Title).unwrap();
        assert_eq!((title.mean, title.n_items, title.missing), (3.0, 2, 1));
        assert_eq!(title.histogram, BTreeMap::from([(2, 1), (4, 1)]));
        assert!(measure_m(&cat, &vocab, ItemEncoding::Category).is_err());
    }

    #[test]
    fn csv_rows() {
        let reg = ProfileRegistry::<f64>::builtin();
        let p = reg.get("mistral7b").unwrap();
        let single = reg.reference_spec("mistral7b", ItemEncoding::Id).unwrap();
        let title = reg.reference_spec("mistral7b", ItemEncoding::Title).unwrap();
        let rows = latency_rows("ref", p, &single, &[(ItemEncoding::Id, single.clone()), (ItemEncoding::Title, title)]);
        let mut out = Vec::new();
        write_latency_csv(&rows, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.contains("ref,title,mistral7b,75.0000,400.0000,475.0000,8.6364"), "{text}");
        assert!(text.contains("ref,id,mistral7b,35.0000,20.0000,55.0000,1.0000"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(2000))]

        #[test]
        fn speedup_within_bounds(
            l_decode in 0i64..1000, l_prefill_num in 0i64..1000, l_prefill_den in 1i64..100,
            m in 1u64..64, h in 1u64..200, c in 0u64..500,
        ) {
            prop_assume!(l_decode > 0 || l_prefill_num > 0);
            let p = DeploymentProfile::linear("r", q(l_decode, 1), q(l_prefill_num, l_prefill_den)).unwrap();
            let multi = EncodingSpec::<Q>::from_counts(m, h, c).unwrap();
            let single = EncodingSpec::<Q>::from_counts(1, h, c).unwrap();
            let s = speedup(&p, &multi, &single);
            let (lo, hi) = speedup_bounds(&multi, &single);
            prop_assert!(lo <= s && s <= hi);
        }

        #[test]
        fn total_latency_is_monotone(
            l_decode in 0.0f64..100.0, l_prefill in 0.0f64..2.0,
            m in 1u64..30, h in 1u64..50, c in 0u64..100,
        ) {
            let p = DeploymentProfile::linear("r", l_decode, l_prefill).unwrap();
            let base = total_latency(&p, &EncodingSpec::from_counts(m, h, c).unwrap());
            prop_assert!(total_latency(&p, &EncodingSpec::from_counts(m + 1, h, c).unwrap()) >= base);
            prop_assert!(total_latency(&p, &EncodingSpec::from_counts(m, h + 1, c).unwrap()) >= base);
            prop_assert!(total_latency(&p, &EncodingSpec::from_counts(m, h, c + 1).unwrap()) >= base);
            let slower = DeploymentProfile::linear("r", l_decode + 1.0, l_prefill).unwrap();
            prop_assert!(total_latency(&slower, &EncodingSpec::from_counts(m, h, c).unwrap()) >= base);
        }
    }
}
