use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::binformat::{Binary, Origin};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyConversion {
    pub family: String,
    pub total: usize,
    pub converted: usize,
    pub percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConversionStats {
    pub per_family: Vec<FamilyConversion>,
    pub total: usize,
    pub converted: usize,
    pub percent: f64,
    /// Families where nothing converted.
    pub empty_classes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConversionReport {
    pub morph: ConversionStats,
    pub pack: ConversionStats,
}

/// `converted / total` as a percentage, rounded half-up to two decimals
/// using exact integer arithmetic.
pub fn percent_2dp(converted: usize, total: usize) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let (c, t) = (converted as u128, total as u128);
    let hundredths = (c * 20_000 + t) / (2 * t);
    hundredths as f64 / 100.0
}

fn stats(base: &[Binary], transformed: &[Binary], origin: Origin) -> ConversionStats {
    let mut totals: BTreeMap<&str, usize> = BTreeMap::new();
    let mut base_ids = BTreeSet::new();
    for b in base.iter().filter(|b| b.origin == Origin::Base) {
        *totals.entry(b.family.as_str()).or_default() += 1;
        base_ids.insert(b.id.as_str());
    }
    let mut converted_ids: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for t in transformed.iter().filter(|t| t.origin == origin) {
        if let Some(p) = t.parent_id.as_deref().filter(|p| base_ids.contains(p)) {
            converted_ids.entry(t.family.as_str()).or_default().insert(p);
        }
    }
    let per_family: Vec<FamilyConversion> = totals
        .iter()
        .map(|(&f, &total)| {
            let converted = converted_ids.get(f).map_or(0, |s| s.len());
            FamilyConversion {
                family: f.to_string(),
                total,
                converted,
                percent: percent_2dp(converted, total),
            }
        })
        .collect();
    let total = per_family.iter().map(|f| f.total).sum();
    let converted = per_family.iter().map(|f| f.converted).sum();
    ConversionStats {
        empty_classes: per_family
            .iter()
            .filter(|f| f.converted == 0)
            .map(|f| f.family.clone())
            .collect(),
        per_family,
        total,
        converted,
        percent: percent_2dp(converted, total),
    }
}

/// Per-family and overall conversion rates of `base` into `transformed`.
pub fn conversion_report(base: &[Binary], transformed: &[Binary]) -> ConversionReport {
    ConversionReport {
        morph: stats(base, transformed, Origin::Morphed),
        pack: stats(base, transformed, Origin::Packed),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::binformat::{Section, SectionKind, CONTAINER_MAGIC};

    fn b(id: &str, fam: &str) -> Binary {
        Binary::new(id, fam, CONTAINER_MAGIC, vec![Section::new(SectionKind::Data, vec![1])], vec![])
    }

    fn child(parent: &Binary, origin: Origin) -> Binary {
        let mut c = parent.clone();
        c.id = format!("{}.t", parent.id);
        c.origin = origin;
        c.parent_id = Some(parent.id.clone());
        c
    }

    #[test]
    fn rounding_is_half_up() {
        assert_eq!(percent_2dp(4, 12), 33.33);
        assert_eq!(percent_2dp(2, 3), 66.67);
        assert_eq!(percent_2dp(1, 8), 12.5);
        assert_eq!(percent_2dp(1, 80000), 0.0); // 0.00125 -> 0.00
        assert_eq!(percent_2dp(1, 20000), 0.01); // 0.005 -> 0.01 (half up)
    }

    #[test]
    fn four_of_twelve_packed() {
        let base: Vec<Binary> = (0..12).map(|i| b(&format!("a{i}"), "a")).collect();
        let t: Vec<Binary> = base[..4].iter().map(|x| child(x, Origin::Packed)).collect();
        let r = conversion_report(&base, &t);
        assert_eq!(r.pack.percent, 33.33);
        assert_eq!(r.pack.converted, 4);
        assert_eq!(r.morph.empty_classes, vec!["a".to_string()]);
    }

    #[test]
    fn empty_families_are_listed() {
        let base = vec![b("a0", "a"), b("b0", "b"), b("c0", "c")];
        let t = vec![child(&base[1], Origin::Packed)];
        let r = conversion_report(&base, &t);
        assert_eq!(r.pack.empty_classes, vec!["a".to_string(), "c".to_string()]);
        assert_eq!(r.pack.per_family[1].percent, 100.0);
    }
}
