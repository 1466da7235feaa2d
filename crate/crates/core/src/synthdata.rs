//! Rule-based synthetic outfit generator.
//!
//! Real outfit corpora with factor-level verdicts are hard to come by, so
//! this module plants its own ground truth: every outfit is a pair of
//! garments described by catalog attributes (a palette color, a print, a
//! material, a silhouette, a detail), and a fixed [`RuleSet`] of attribute
//! pairings decides the judgment. A clashing pair makes the outfit `bad`
//! with the clashing factor as the reason; a highlight pair makes it
//! `good`; anything else is `normal`. Clashes dominate highlights.
//!
//! Features are what a perception stack would plausibly emit: the garment
//! color rendered through the quantized-color pipeline of
//! [`crate::colorfeat`], one-hot attribute blocks for the rest, and
//! Gaussian noise over everything. Labels depend only on the attributes,
//! never on the noise, so a brute-force re-evaluation of the rules against
//! a record's attribute map must reproduce its stored labels exactly —
//! the honesty check the tests lean on.
//!
//! Everything is deterministic given the seed.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::colorfeat::{build_color_feature, ColorHistogram, FocoCode};
use crate::record::{
    FactorFeatureSet, FactorKind, FeatureDims, Judgment, OutfitRecord, Reason,
};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("class ratios infeasible: good={good}, bad={bad} (each must be >= 0 and sum to <= 1)")]
    InfeasibleRatios { good: f64, bad: f64 },
    #[error("echo ratio {value} outside [0, 1]")]
    EchoRatioOutOfRange { value: f64 },
    #[error("gave up sampling a {judgment} outfit after {attempts} attempts; rules may make the class unreachable")]
    TargetUnreachable { judgment: Judgment, attempts: usize },
    #[error("record {outfit_id:?} has no {key:?} attribute")]
    MissingAttribute { outfit_id: String, key: String },
    #[error("record {outfit_id:?} has unknown {key:?} value {value:?}")]
    UnknownAttribute { outfit_id: String, key: String, value: String },
}

/// A named palette color with its quantized code.
#[derive(Clone, Copy, Debug)]
pub struct PaletteColor {
    pub name: &'static str,
    pub code: FocoCode,
}

/// The closed attribute vocabulary outfits are sampled from.
#[derive(Clone, Debug)]
pub struct AttributeCatalog {
    pub palette: Vec<PaletteColor>,
    pub prints: Vec<&'static str>,
    pub materials: Vec<&'static str>,
    pub silhouettes: Vec<&'static str>,
    pub details: Vec<&'static str>,
}

impl AttributeCatalog {
    /// The standard catalog: 14 prints, 5 silhouettes, 8 details,
    /// 10 materials, and a 10-color palette. The counts line up with the
    /// default [`FeatureDims`] so one-hot blocks fill their slices exactly.
    pub fn standard() -> Self {
        let color = |name, h, s, b| PaletteColor {
            name,
            code: FocoCode::new(h, s, b).expect("palette codes are in range"),
        };
        AttributeCatalog {
            palette: vec![
                color("scarlet", 1, 8, 4),
                color("burgundy", 1, 8, 1),
                color("gold", 3, 8, 6),
                color("olive", 4, 4, 2),
                color("emerald", 6, 8, 3),
                color("teal", 8, 6, 4),
                color("azure", 10, 8, 5),
                color("navy", 11, 8, 1),
                color("violet", 13, 6, 3),
                color("ivory", 2, 1, 6),
            ],
            prints: vec![
                "solid",
                "stripe",
                "floral",
                "plaid",
                "polka-dot",
                "leopard",
                "zebra",
                "paisley",
                "houndstooth",
                "herringbone",
                "camo",
                "tie-dye",
                "geometric",
                "chevron",
            ],
            materials: vec![
                "cotton", "denim", "leather", "silk", "wool", "linen", "velvet", "tweed",
                "satin", "corduroy",
            ],
            silhouettes: vec!["fitted", "oversized", "a-line", "straight", "flared"],
            details: vec![
                "plain",
                "ruffles",
                "sequins",
                "fringe",
                "embroidery",
                "studs",
                "lace-trim",
                "pockets",
            ],
        }
    }

    pub fn names(&self, factor: FactorKind) -> Vec<&'static str> {
        match factor {
            FactorKind::Color => self.palette.iter().map(|c| c.name).collect(),
            FactorKind::Print => self.prints.clone(),
            FactorKind::Material => self.materials.clone(),
            FactorKind::Silhouette => self.silhouettes.clone(),
            FactorKind::Detail => self.details.clone(),
        }
    }

    pub fn count(&self, factor: FactorKind) -> usize {
        match factor {
            FactorKind::Color => self.palette.len(),
            FactorKind::Print => self.prints.len(),
            FactorKind::Material => self.materials.len(),
            FactorKind::Silhouette => self.silhouettes.len(),
            FactorKind::Detail => self.details.len(),
        }
    }

    pub fn index_of(&self, factor: FactorKind, name: &str) -> Option<usize> {
        self.names(factor).iter().position(|n| *n == name)
    }
}

/// One garment as indices into the catalog.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GarmentAttributes {
    pub color: usize,
    pub print: usize,
    pub material: usize,
    pub silhouette: usize,
    pub detail: usize,
}

impl GarmentAttributes {
    pub fn get(&self, factor: FactorKind) -> usize {
        match factor {
            FactorKind::Color => self.color,
            FactorKind::Print => self.print,
            FactorKind::Material => self.material,
            FactorKind::Silhouette => self.silhouette,
            FactorKind::Detail => self.detail,
        }
    }

    pub fn set(&mut self, factor: FactorKind, index: usize) {
        match factor {
            FactorKind::Color => self.color = index,
            FactorKind::Print => self.print = index,
            FactorKind::Material => self.material = index,
            FactorKind::Silhouette => self.silhouette = index,
            FactorKind::Detail => self.detail = index,
        }
    }
}

/// A top/bottom pairing at the attribute level.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OutfitAttributes {
    pub top: GarmentAttributes,
    pub bottom: GarmentAttributes,
}

/// A pairing convention on one factor: the rule fires when the top and
/// bottom attribute indices form one of the listed pairs, in either order.
#[derive(Clone, Debug)]
pub struct PairRule {
    pub factor: FactorKind,
    pub pairs: Vec<(usize, usize)>,
}

impl PairRule {
    pub fn matches(&self, outfit: &OutfitAttributes) -> bool {
        let t = outfit.top.get(self.factor);
        let b = outfit.bottom.get(self.factor);
        self.pairs.iter().any(|&(x, y)| (t == x && b == y) || (t == y && b == x))
    }
}

/// What the rules say about one outfit.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Verdict {
    pub judgment: Judgment,
    pub reason: Option<Reason>,
    /// How many rules fired in total; >1 means the reason was decided by
    /// the dominance order rather than being unambiguous.
    pub fired: usize,
}

/// Clash rules (fire -> bad) and highlight rules (fire -> good).
#[derive(Clone, Debug)]
pub struct RuleSet {
    pub clash: Vec<PairRule>,
    pub highlight: Vec<PairRule>,
}

impl RuleSet {
    /// The planted conventions used throughout. Indices refer to
    /// [`AttributeCatalog::standard`]. Several attributes appear in both a
    /// clash and a highlight (floral is dazzling on both garments but a
    /// statement over a solid), so no single garment decides anything.
    pub fn standard(catalog: &AttributeCatalog) -> Self {
        let idx = |factor: FactorKind, name: &str| {
            catalog
                .index_of(factor, name)
                .unwrap_or_else(|| panic!("{name:?} missing from standard catalog"))
        };
        let pairs = |factor: FactorKind, names: &[(&str, &str)]| PairRule {
            factor,
            pairs: names.iter().map(|&(a, b)| (idx(factor, a), idx(factor, b))).collect(),
        };
        // Every pair of "busy" prints clashes, including a print with itself.
        let busy = ["floral", "plaid", "leopard", "zebra"];
        let mut busy_pairs = Vec::new();
        for (i, a) in busy.iter().enumerate() {
            for b in &busy[i..] {
                busy_pairs.push((*a, *b));
            }
        }
        RuleSet {
            clash: vec![
                pairs(
                    FactorKind::Color,
                    &[
                        ("scarlet", "violet"),
                        ("scarlet", "emerald"),
                        ("burgundy", "olive"),
                        ("gold", "teal"),
                        ("emerald", "azure"),
                        ("navy", "ivory"),
                    ],
                ),
                pairs(FactorKind::Print, &busy_pairs),
                pairs(
                    FactorKind::Material,
                    &[("leather", "velvet"), ("tweed", "satin"), ("corduroy", "silk")],
                ),
                pairs(FactorKind::Silhouette, &[("oversized", "oversized")]),
                pairs(
                    FactorKind::Detail,
                    &[("sequins", "fringe"), ("ruffles", "studs"), ("sequins", "sequins")],
                ),
            ],
            highlight: vec![
                pairs(
                    FactorKind::Color,
                    &[
                        ("scarlet", "navy"),
                        ("gold", "ivory"),
                        ("emerald", "burgundy"),
                        ("azure", "ivory"),
                        ("violet", "gold"),
                        ("teal", "navy"),
                    ],
                ),
                pairs(
                    FactorKind::Print,
                    &[
                        ("floral", "solid"),
                        ("leopard", "solid"),
                        ("tie-dye", "solid"),
                        ("geometric", "solid"),
                    ],
                ),
                pairs(
                    FactorKind::Material,
                    &[("denim", "cotton"), ("leather", "denim"), ("silk", "linen")],
                ),
                pairs(FactorKind::Silhouette, &[("fitted", "flared")]),
                pairs(FactorKind::Detail, &[("embroidery", "plain"), ("lace-trim", "plain")]),
            ],
        }
    }

    /// Total, deterministic label function. Any clash makes the outfit bad;
    /// otherwise any highlight makes it good. Among fired rules of the
    /// deciding family, the reason is the first in (color, print, design)
    /// order.
    pub fn evaluate(&self, outfit: &OutfitAttributes) -> Verdict {
        let fired_reasons = |rules: &[PairRule]| -> Vec<Reason> {
            rules.iter().filter(|r| r.matches(outfit)).map(|r| r.factor.reason()).collect()
        };
        let clashes = fired_reasons(&self.clash);
        let highlights = fired_reasons(&self.highlight);
        let fired = clashes.len() + highlights.len();
        let first_by_priority = |reasons: &[Reason]| {
            Reason::ALL.into_iter().find(|r| reasons.contains(r)).expect("nonempty")
        };
        if !clashes.is_empty() {
            Verdict { judgment: Judgment::Bad, reason: Some(first_by_priority(&clashes)), fired }
        } else if !highlights.is_empty() {
            Verdict {
                judgment: Judgment::Good,
                reason: Some(first_by_priority(&highlights)),
                fired,
            }
        } else {
            Verdict { judgment: Judgment::Normal, reason: None, fired }
        }
    }
}

/// Generation settings. Class ratios default to a heavy normal majority
/// with good outnumbering bad, and sampling rejects outfits that fire more
/// than one rule so every labeled reason is unambiguous (opt out with
/// `allow_ambiguous`).
///
/// `echo_ratio` plants deliberate ambiguity instead: that fraction of good
/// and bad outfits get a second rule-firing pairing of the same direction
/// in a different reason bucket, and the stored reason names the
/// higher-priority bucket (color over print over design) the way an
/// annotator singles out the decisive factor. The judgment alone no longer
/// determines which contributing factor the label names, so reason labels
/// on echoed corpora carry information a judgment-only learner never sees.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// Standard deviation of the Gaussian noise added to every feature.
    pub noise: f64,
    pub good_ratio: f64,
    pub bad_ratio: f64,
    pub allow_ambiguous: bool,
    /// Fraction of good/bad outfits that receive a second same-direction
    /// cue in another reason bucket.
    pub echo_ratio: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            train: 2000,
            val: 500,
            test: 500,
            noise: 0.1,
            good_ratio: 0.158,
            bad_ratio: 0.092,
            allow_ambiguous: false,
            echo_ratio: 0.0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let feasible = self.good_ratio >= 0.0
            && self.bad_ratio >= 0.0
            && self.good_ratio + self.bad_ratio <= 1.0
            && self.noise >= 0.0
            && self.noise.is_finite();
        if !feasible {
            return Err(SynthError::InfeasibleRatios { good: self.good_ratio, bad: self.bad_ratio });
        }
        if !(0.0..=1.0).contains(&self.echo_ratio) {
            return Err(SynthError::EchoRatioOutOfRange { value: self.echo_ratio });
        }
        Ok(())
    }
}

/// The generated corpus.
#[derive(Clone, Debug)]
pub struct DatasetSplits {
    pub train: Vec<OutfitRecord>,
    pub val: Vec<OutfitRecord>,
    pub test: Vec<OutfitRecord>,
}

/// Integer class counts for `n` samples honoring the ratios as closely as
/// possible (largest-remainder rounding; ties favor the earlier class).
/// Order follows [`Judgment::ALL`]: good, normal, bad.
fn class_counts(n: usize, good_ratio: f64, bad_ratio: f64) -> [usize; 3] {
    let ratios = [good_ratio, 1.0 - good_ratio - bad_ratio, bad_ratio];
    let mut counts = [0usize; 3];
    let mut fracs = [(0.0f64, 0usize); 3];
    for (i, r) in ratios.iter().enumerate() {
        let exact = r * n as f64;
        counts[i] = exact.floor() as usize;
        fracs[i] = (exact - exact.floor(), i);
    }
    let assigned: usize = counts.iter().sum();
    // Stable sort keeps equal remainders in class order.
    fracs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    for k in 0..n - assigned {
        counts[fracs[k % 3].1] += 1;
    }
    counts
}

fn sample_garment(catalog: &AttributeCatalog, rng: &mut ChaCha8Rng) -> GarmentAttributes {
    GarmentAttributes {
        color: rng.random_range(0..catalog.palette.len()),
        print: rng.random_range(0..catalog.prints.len()),
        material: rng.random_range(0..catalog.materials.len()),
        silhouette: rng.random_range(0..catalog.silhouettes.len()),
        detail: rng.random_range(0..catalog.details.len()),
    }
}

fn one_hot(index: usize, len: usize) -> Vec<f64> {
    let mut v = vec![0.0; len];
    v[index] = 1.0;
    v
}

fn garment_features(
    catalog: &AttributeCatalog,
    garment: &GarmentAttributes,
    noise: &Normal<f64>,
    rng: &mut ChaCha8Rng,
) -> FactorFeatureSet {
    let mut histogram = ColorHistogram::new();
    histogram.insert(catalog.palette[garment.color].code, 1.0);
    let mut noisy = |mut v: Vec<f64>| {
        for e in v.iter_mut() {
            *e += noise.sample(rng);
        }
        v
    };
    FactorFeatureSet {
        color: noisy(build_color_feature(&histogram)),
        print: noisy(one_hot(garment.print, catalog.prints.len())),
        material: noisy(one_hot(garment.material, catalog.materials.len())),
        silhouette: noisy(one_hot(garment.silhouette, catalog.silhouettes.len())),
        detail: noisy(one_hot(garment.detail, catalog.details.len())),
    }
}

fn attribute_map(
    catalog: &AttributeCatalog,
    outfit: &OutfitAttributes,
) -> std::collections::BTreeMap<String, String> {
    let mut map = std::collections::BTreeMap::new();
    for factor in FactorKind::ALL {
        let names = catalog.names(factor);
        map.insert(format!("{factor}_top"), names[outfit.top.get(factor)].to_string());
        map.insert(format!("{factor}_bottom"), names[outfit.bottom.get(factor)].to_string());
    }
    map
}

fn build_record(
    catalog: &AttributeCatalog,
    outfit: &OutfitAttributes,
    verdict: &Verdict,
    outfit_id: String,
    noise: &Normal<f64>,
    rng: &mut ChaCha8Rng,
) -> OutfitRecord {
    OutfitRecord {
        outfit_id,
        judgment: verdict.judgment,
        reason: verdict.reason,
        top: garment_features(catalog, &outfit.top, noise, rng),
        bottom: garment_features(catalog, &outfit.bottom, noise, rng),
        attributes: attribute_map(catalog, outfit),
    }
}

const MAX_SAMPLE_ATTEMPTS: usize = 100_000;

/// Overwrite one factor outside `base` with a rule-firing pairing of the
/// outfit's own direction, then relabel. The clash and highlight pair
/// lists are disjoint on every factor, so the judgment survives; the
/// reason moves to whichever firing bucket ranks first in the dominance
/// order, exactly like an annotator naming the decisive factor of an
/// outfit that has two things going on.
fn echo_second_cue(
    outfit: &mut OutfitAttributes,
    rules: &RuleSet,
    base: Reason,
    judgment: Judgment,
    rng: &mut ChaCha8Rng,
) -> Verdict {
    let direction = match judgment {
        Judgment::Bad => &rules.clash,
        _ => &rules.highlight,
    };
    let buckets: Vec<Reason> = Reason::ALL.into_iter().filter(|r| *r != base).collect();
    let bucket = buckets[rng.random_range(0..buckets.len())];
    let rules_in_bucket: Vec<&PairRule> =
        direction.iter().filter(|r| r.factor.reason() == bucket).collect();
    let rule = rules_in_bucket[rng.random_range(0..rules_in_bucket.len())];
    let (a, b) = rule.pairs[rng.random_range(0..rule.pairs.len())];
    let (top, bottom) = if rng.random_bool(0.5) { (a, b) } else { (b, a) };
    outfit.top.set(rule.factor, top);
    outfit.bottom.set(rule.factor, bottom);
    rules.evaluate(outfit)
}

fn sample_outfit_of_class(
    catalog: &AttributeCatalog,
    rules: &RuleSet,
    target: Judgment,
    config: &GenConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(OutfitAttributes, Verdict), SynthError> {
    for _ in 0..MAX_SAMPLE_ATTEMPTS {
        let mut outfit = OutfitAttributes {
            top: sample_garment(catalog, rng),
            bottom: sample_garment(catalog, rng),
        };
        let mut verdict = rules.evaluate(&outfit);
        if verdict.judgment != target || !(config.allow_ambiguous || verdict.fired <= 1) {
            continue;
        }
        // Guarded so a zero ratio leaves the draw sequence untouched.
        if target != Judgment::Normal
            && verdict.fired == 1
            && config.echo_ratio > 0.0
            && rng.random_bool(config.echo_ratio)
        {
            let base = verdict.reason.expect("good/bad verdicts carry a reason");
            verdict = echo_second_cue(&mut outfit, rules, base, target, rng);
            debug_assert_eq!(verdict.judgment, target);
            debug_assert_eq!(verdict.fired, 2);
        }
        return Ok((outfit, verdict));
    }
    Err(SynthError::TargetUnreachable { judgment: target, attempts: MAX_SAMPLE_ATTEMPTS })
}

/// Generate train/val/test splits with planted, rule-consistent labels.
/// Deterministic given the seed. Feature blocks follow
/// [`FeatureDims::default`] (the catalog's one-hot widths plus the
/// 25-element color feature).
pub fn generate_dataset(config: &GenConfig, seed: u64) -> Result<DatasetSplits, SynthError> {
    config.validate()?;
    let catalog = AttributeCatalog::standard();
    let rules = RuleSet::standard(&catalog);
    let dims = FeatureDims::default();
    debug_assert_eq!(
        [
            catalog.prints.len(),
            catalog.materials.len(),
            catalog.silhouettes.len(),
            catalog.details.len()
        ],
        [dims.print, dims.material, dims.silhouette, dims.detail],
    );
    let noise = Normal::new(0.0, config.noise).expect("validated noise level");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut splits = Vec::with_capacity(3);
    for (name, n) in [("train", config.train), ("val", config.val), ("test", config.test)] {
        let counts = class_counts(n, config.good_ratio, config.bad_ratio);
        let mut records = Vec::with_capacity(n);
        for (class, count) in Judgment::ALL.into_iter().zip(counts) {
            for _ in 0..count {
                let (outfit, verdict) =
                    sample_outfit_of_class(&catalog, &rules, class, config, &mut rng)?;
                // Placeholder id; assigned after the shuffle below.
                let record =
                    build_record(&catalog, &outfit, &verdict, String::new(), &noise, &mut rng);
                records.push(record);
            }
        }
        records.shuffle(&mut rng);
        for (i, record) in records.iter_mut().enumerate() {
            record.outfit_id = format!("{name}-{i:05}");
        }
        splits.push(records);
    }
    let mut it = splits.into_iter();
    Ok(DatasetSplits {
        train: it.next().unwrap(),
        val: it.next().unwrap(),
        test: it.next().unwrap(),
    })
}

/// Read an outfit's attribute indices back out of its string map.
pub fn parse_attributes(
    catalog: &AttributeCatalog,
    record: &OutfitRecord,
) -> Result<OutfitAttributes, SynthError> {
    let lookup = |factor: FactorKind, side: &str| -> Result<usize, SynthError> {
        let key = format!("{factor}_{side}");
        let value = record.attributes.get(&key).ok_or_else(|| SynthError::MissingAttribute {
            outfit_id: record.outfit_id.clone(),
            key: key.clone(),
        })?;
        catalog.index_of(factor, value).ok_or_else(|| SynthError::UnknownAttribute {
            outfit_id: record.outfit_id.clone(),
            key,
            value: value.clone(),
        })
    };
    let garment = |side: &str| -> Result<GarmentAttributes, SynthError> {
        Ok(GarmentAttributes {
            color: lookup(FactorKind::Color, side)?,
            print: lookup(FactorKind::Print, side)?,
            material: lookup(FactorKind::Material, side)?,
            silhouette: lookup(FactorKind::Silhouette, side)?,
            detail: lookup(FactorKind::Detail, side)?,
        })
    };
    Ok(OutfitAttributes { top: garment("top")?, bottom: garment("bottom")? })
}

/// Re-pair tops and bottoms uniformly at random and relabel the results
/// with the rule set. Because the pairings no longer honor generation
/// quotas, the class mix shifts toward however often random pairings
/// happen to clash or harmonize — a genuinely different distribution over
/// the same garments. Garment features are carried over unchanged.
pub fn make_test_random(
    records: &[OutfitRecord],
    seed: u64,
) -> Result<Vec<OutfitRecord>, SynthError> {
    let catalog = AttributeCatalog::standard();
    let rules = RuleSet::standard(&catalog);
    let parsed: Vec<OutfitAttributes> = records
        .iter()
        .map(|r| parse_attributes(&catalog, r))
        .collect::<Result<_, _>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bottom_of: Vec<usize> = (0..records.len()).collect();
    bottom_of.shuffle(&mut rng);

    let mut out = Vec::with_capacity(records.len());
    for (i, b) in bottom_of.into_iter().enumerate() {
        let outfit = OutfitAttributes { top: parsed[i].top, bottom: parsed[b].bottom };
        let verdict = rules.evaluate(&outfit);
        out.push(OutfitRecord {
            outfit_id: format!("rand-{i:05}"),
            judgment: verdict.judgment,
            reason: verdict.reason,
            top: records[i].top.clone(),
            bottom: records[b].bottom.clone(),
            attributes: attribute_map(&catalog, &outfit),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent re-derivation of a record's labels: parse the attribute
    /// map, then walk the rule lists with plain loops.
    fn relabel(catalog: &AttributeCatalog, rules: &RuleSet, record: &OutfitRecord) -> Verdict {
        let outfit = parse_attributes(catalog, record).unwrap();
        let mut clash_reasons = Vec::new();
        let mut highlight_reasons = Vec::new();
        for (family, sink) in
            [(&rules.clash, &mut clash_reasons), (&rules.highlight, &mut highlight_reasons)]
        {
            for rule in family {
                let t = outfit.top.get(rule.factor);
                let b = outfit.bottom.get(rule.factor);
                let hit = rule
                    .pairs
                    .iter()
                    .any(|&(x, y)| (t, b) == (x, y) || (t, b) == (y, x));
                if hit {
                    sink.push(rule.factor.reason());
                }
            }
        }
        let fired = clash_reasons.len() + highlight_reasons.len();
        let pick = |rs: &[Reason]| {
            *Reason::ALL.iter().find(|r| rs.contains(r)).unwrap()
        };
        if !clash_reasons.is_empty() {
            Verdict { judgment: Judgment::Bad, reason: Some(pick(&clash_reasons)), fired }
        } else if !highlight_reasons.is_empty() {
            Verdict { judgment: Judgment::Good, reason: Some(pick(&highlight_reasons)), fired }
        } else {
            Verdict { judgment: Judgment::Normal, reason: None, fired }
        }
    }

    #[test]
    fn standard_catalog_has_expected_vocabulary_sizes() {
        let catalog = AttributeCatalog::standard();
        assert_eq!(catalog.prints.len(), 14);
        assert_eq!(catalog.silhouettes.len(), 5);
        assert_eq!(catalog.details.len(), 8);
        assert_eq!(catalog.materials.len(), 10);
        assert!(!catalog.palette.is_empty());
        // Names are unique per factor.
        for factor in FactorKind::ALL {
            let mut names = catalog.names(factor);
            names.sort_unstable();
            names.dedup();
            assert_eq!(names.len(), catalog.count(factor), "{factor}");
        }
        // One-hot widths line up with the default feature dims.
        let dims = FeatureDims::default();
        assert_eq!(catalog.prints.len(), dims.print);
        assert_eq!(catalog.materials.len(), dims.material);
        assert_eq!(catalog.silhouettes.len(), dims.silhouette);
        assert_eq!(catalog.details.len(), dims.detail);
    }

    #[test]
    fn rule_evaluation_handles_order_and_dominance() {
        let catalog = AttributeCatalog::standard();
        let rules = RuleSet::standard(&catalog);
        let idx = |f, n| catalog.index_of(f, n).unwrap();
        let base = GarmentAttributes {
            color: idx(FactorKind::Color, "teal"),
            print: idx(FactorKind::Print, "stripe"),
            material: idx(FactorKind::Material, "cotton"),
            silhouette: idx(FactorKind::Silhouette, "a-line"),
            detail: idx(FactorKind::Detail, "plain"),
        };
        let neutral = OutfitAttributes {
            top: base,
            bottom: GarmentAttributes {
                color: idx(FactorKind::Color, "olive"),
                print: idx(FactorKind::Print, "chevron"),
                material: idx(FactorKind::Material, "wool"),
                silhouette: idx(FactorKind::Silhouette, "straight"),
                detail: idx(FactorKind::Detail, "pockets"),
            },
        };
        assert_eq!(
            rules.evaluate(&neutral),
            Verdict { judgment: Judgment::Normal, reason: None, fired: 0 }
        );

        // Busy print pair clashes in either order.
        let mut floral_top = neutral;
        floral_top.top.print = idx(FactorKind::Print, "floral");
        floral_top.bottom.print = idx(FactorKind::Print, "leopard");
        let v = rules.evaluate(&floral_top);
        assert_eq!((v.judgment, v.reason), (Judgment::Bad, Some(Reason::Print)));
        std::mem::swap(&mut floral_top.top.print, &mut floral_top.bottom.print);
        let v = rules.evaluate(&floral_top);
        assert_eq!((v.judgment, v.reason), (Judgment::Bad, Some(Reason::Print)));

        // A clash anywhere beats a highlight anywhere.
        let mut mixed = neutral;
        mixed.top.color = idx(FactorKind::Color, "scarlet");
        mixed.bottom.color = idx(FactorKind::Color, "navy"); // highlight
        mixed.top.silhouette = idx(FactorKind::Silhouette, "oversized");
        mixed.bottom.silhouette = idx(FactorKind::Silhouette, "oversized"); // clash
        let v = rules.evaluate(&mixed);
        assert_eq!((v.judgment, v.reason), (Judgment::Bad, Some(Reason::Design)));
        assert_eq!(v.fired, 2);

        // Two clashes: color outranks design in the reason.
        let mut double = mixed;
        double.bottom.color = idx(FactorKind::Color, "violet"); // scarlet+violet clash
        let v = rules.evaluate(&double);
        assert_eq!((v.judgment, v.reason), (Judgment::Bad, Some(Reason::Color)));
    }

    #[test]
    fn generated_labels_survive_brute_force_reevaluation() {
        let catalog = AttributeCatalog::standard();
        let rules = RuleSet::standard(&catalog);
        for noise in [0.0, 0.2] {
            let config = GenConfig { train: 200, val: 60, test: 60, noise, ..Default::default() };
            let splits = generate_dataset(&config, 42).unwrap();
            for record in splits.train.iter().chain(&splits.val).chain(&splits.test) {
                let expected = relabel(&catalog, &rules, record);
                assert_eq!(record.judgment, expected.judgment, "{}", record.outfit_id);
                assert_eq!(record.reason, expected.reason, "{}", record.outfit_id);
                // Default generation refuses ambiguous samples.
                assert!(expected.fired <= 1, "{} fired {}", record.outfit_id, expected.fired);
            }
        }
    }

    #[test]
    fn echoed_outfits_fire_two_buckets_and_keep_the_priority_reason() {
        let catalog = AttributeCatalog::standard();
        let rules = RuleSet::standard(&catalog);
        let config = GenConfig {
            train: 400,
            val: 0,
            test: 0,
            echo_ratio: 1.0,
            ..Default::default()
        };
        let splits = generate_dataset(&config, 31).unwrap();
        let fired_buckets = |record: &OutfitRecord, family: &[PairRule]| -> Vec<Reason> {
            let outfit = parse_attributes(&catalog, record).unwrap();
            family
                .iter()
                .filter(|rule| rule.matches(&outfit))
                .map(|rule| rule.factor.reason())
                .collect()
        };
        for record in &splits.train {
            let expected = relabel(&catalog, &rules, record);
            assert_eq!(record.judgment, expected.judgment, "{}", record.outfit_id);
            assert_eq!(record.reason, expected.reason, "{}", record.outfit_id);
            match record.judgment {
                Judgment::Normal => assert_eq!(expected.fired, 0, "{}", record.outfit_id),
                judgment => {
                    let family =
                        if judgment == Judgment::Bad { &rules.clash } else { &rules.highlight };
                    let buckets = fired_buckets(record, family);
                    assert_eq!(buckets.len(), 2, "{}", record.outfit_id);
                    assert_ne!(buckets[0], buckets[1], "{}", record.outfit_id);
                    let named = Reason::ALL
                        .into_iter()
                        .find(|r| buckets.contains(r))
                        .unwrap();
                    assert_eq!(record.reason, Some(named), "{}", record.outfit_id);
                }
            }
        }
        let out_of_range = GenConfig { echo_ratio: 1.5, ..Default::default() };
        assert!(matches!(
            out_of_range.validate(),
            Err(SynthError::EchoRatioOutOfRange { .. })
        ));
    }

    #[test]
    fn class_mix_honors_requested_ratios() {
        let config = GenConfig { train: 1000, val: 0, test: 0, ..Default::default() };
        let splits = generate_dataset(&config, 7).unwrap();
        let count = |j: Judgment| splits.train.iter().filter(|r| r.judgment == j).count();
        assert_eq!(count(Judgment::Good), 158);
        assert_eq!(count(Judgment::Normal), 750);
        assert_eq!(count(Judgment::Bad), 92);
    }

    #[test]
    fn class_counts_use_largest_remainder() {
        assert_eq!(class_counts(10, 0.158, 0.092), [2, 7, 1]);
        assert_eq!(class_counts(1000, 0.158, 0.092), [158, 750, 92]);
        assert_eq!(class_counts(0, 0.158, 0.092), [0, 0, 0]);
        assert_eq!(class_counts(1, 0.0, 0.0), [0, 1, 0]);
        // Every result sums to n.
        for n in 0..50 {
            assert_eq!(class_counts(n, 0.158, 0.092).iter().sum::<usize>(), n);
        }
    }

    #[test]
    fn generation_is_deterministic_in_the_seed() {
        let config = GenConfig { train: 50, val: 20, test: 20, ..Default::default() };
        let a = generate_dataset(&config, 99).unwrap();
        let b = generate_dataset(&config, 99).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.val, b.val);
        assert_eq!(a.test, b.test);
        let c = generate_dataset(&config, 100).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn features_encode_attributes_when_noise_is_zero() {
        let config = GenConfig { train: 30, val: 0, test: 0, noise: 0.0, ..Default::default() };
        let splits = generate_dataset(&config, 5).unwrap();
        let catalog = AttributeCatalog::standard();
        for record in &splits.train {
            let outfit = parse_attributes(&catalog, record).unwrap();
            for (features, garment) in
                [(&record.top, &outfit.top), (&record.bottom, &outfit.bottom)]
            {
                assert_eq!(features.print, one_hot(garment.print, catalog.prints.len()));
                assert_eq!(features.material, one_hot(garment.material, 10));
                assert_eq!(features.silhouette, one_hot(garment.silhouette, 5));
                assert_eq!(features.detail, one_hot(garment.detail, 8));
                let mut hist = ColorHistogram::new();
                hist.insert(catalog.palette[garment.color].code, 1.0);
                assert_eq!(features.color, build_color_feature(&hist));
            }
        }
    }

    #[test]
    fn infeasible_ratios_are_rejected() {
        let bad = GenConfig { good_ratio: 0.7, bad_ratio: 0.5, ..Default::default() };
        assert!(matches!(
            generate_dataset(&bad, 1),
            Err(SynthError::InfeasibleRatios { .. })
        ));
        let negative = GenConfig { good_ratio: -0.1, ..Default::default() };
        assert!(negative.validate().is_err());
    }

    #[test]
    fn test_random_relabels_and_preserves_garments() {
        let catalog = AttributeCatalog::standard();
        let rules = RuleSet::standard(&catalog);
        let config = GenConfig { train: 0, val: 0, test: 400, ..Default::default() };
        let splits = generate_dataset(&config, 11).unwrap();
        let random = make_test_random(&splits.test, 12).unwrap();
        assert_eq!(random.len(), splits.test.len());

        // Labels are honest under re-evaluation.
        for record in &random {
            let expected = relabel(&catalog, &rules, record);
            assert_eq!(record.judgment, expected.judgment);
            assert_eq!(record.reason, expected.reason);
        }

        // The same tops and the same bottoms, as multisets of attributes.
        let tops = |records: &[OutfitRecord]| {
            let mut v: Vec<GarmentAttributes> = records
                .iter()
                .map(|r| parse_attributes(&catalog, r).unwrap().top)
                .collect();
            v.sort_by_key(|a| (a.color, a.print, a.material, a.silhouette, a.detail));
            v
        };
        let bottoms = |records: &[OutfitRecord]| {
            let mut v: Vec<GarmentAttributes> = records
                .iter()
                .map(|r| parse_attributes(&catalog, r).unwrap().bottom)
                .collect();
            v.sort_by_key(|a| (a.color, a.print, a.material, a.silhouette, a.detail));
            v
        };
        assert_eq!(tops(&splits.test), tops(&random));
        assert_eq!(bottoms(&splits.test), bottoms(&random));
    }

    #[test]
    fn test_random_shifts_the_class_mix_toward_rule_hits() {
        let config = GenConfig { train: 0, val: 0, test: 2000, ..Default::default() };
        let splits = generate_dataset(&config, 21).unwrap();
        let random = make_test_random(&splits.test, 22).unwrap();
        let frac = |records: &[OutfitRecord], j: Judgment| {
            records.iter().filter(|r| r.judgment == j).count() as f64 / records.len() as f64
        };
        // Quotas pinned the original at 15.8/75.0/9.2; uniform pairing
        // fires rules far more often.
        assert!(frac(&random, Judgment::Bad) > 0.20);
        assert!(frac(&random, Judgment::Good) > 0.15);
        assert!(frac(&random, Judgment::Normal) < 0.65);
    }

    #[test]
    fn tampered_attributes_fail_parsing() {
        let config = GenConfig { train: 1, val: 0, test: 0, ..Default::default() };
        let mut splits = generate_dataset(&config, 3).unwrap();
        let catalog = AttributeCatalog::standard();
        splits.train[0].attributes.insert("color_top".into(), "chartreuse".into());
        assert!(matches!(
            parse_attributes(&catalog, &splits.train[0]),
            Err(SynthError::UnknownAttribute { .. })
        ));
        splits.train[0].attributes.remove("print_bottom");
        splits.train[0].attributes.insert("color_top".into(), "navy".into());
        assert!(matches!(
            parse_attributes(&catalog, &splits.train[0]),
            Err(SynthError::MissingAttribute { .. })
        ));
    }
}
