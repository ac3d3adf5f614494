//! Parameter movement measurements between two snapshots of a model,
//! used to localize where fine-tuning on a shifted distribution lands.

use std::collections::BTreeMap;

use crate::params::ParamSet;

/// Euclidean distance between snapshots per parameter group (the name
/// prefix before the first '.'; un-prefixed names form their own group).
/// Both sets must contain the same parameter names and shapes.
pub fn group_distances(before: &ParamSet, after: &ParamSet) -> BTreeMap<String, f64> {
    let mut sums: BTreeMap<String, f64> = BTreeMap::new();
    for (_, name, b) in before.iter() {
        let id = after
            .id_of(name)
            .unwrap_or_else(|| panic!("snapshot mismatch: {name} missing from after-set"));
        let a = after.get(id);
        assert_eq!(a.shape(), b.shape(), "snapshot mismatch: {name} changed shape");
        let group = name.split('.').next().unwrap_or(name).to_string();
        *sums.entry(group).or_default() += a.l2_distance(b).powi(2);
    }
    sums.into_iter().map(|(g, s)| (g, s.sqrt())).collect()
}

/// Per-row distances of the prototype matrix, if the model has one.
pub fn prototype_row_distances(before: &ParamSet, after: &ParamSet) -> Option<Vec<f64>> {
    let idb = before.id_of("prototypes")?;
    let ida = after.id_of("prototypes")?;
    let b = before.get(idb);
    let a = after.get(ida);
    assert_eq!(a.shape(), b.shape(), "prototype snapshots changed shape");
    Some(
        (0..b.rows())
            .map(|r| {
                b.row(r)
                    .iter()
                    .zip(a.row(r))
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect(),
    )
}
