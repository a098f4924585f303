use std::path::Path;

use serde::Deserialize;

use crate::{Error, Result};

/// Named sensor positions on the unit head sphere with left/right pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct Montage {
    names: Vec<String>,
    positions: Vec<[f64; 3]>,
    pairs: Vec<(usize, usize)>,
}

#[derive(Deserialize)]
struct Row {
    name: String,
    x: f64,
    y: f64,
    z: f64,
    #[serde(default)]
    pair: Option<String>,
}

impl Montage {
    /// Builds a montage; positions are normalised to unit length.
    pub fn new(names: Vec<String>, positions: Vec<[f64; 3]>, pairs: Vec<(usize, usize)>) -> Result<Self> {
        if names.len() != positions.len() {
            return Err(Error::invalid("montage", "names and positions differ in length"));
        }
        let mut unit = Vec::with_capacity(positions.len());
        for (name, p) in names.iter().zip(&positions) {
            let n = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            if !(n > 0.0) || !n.is_finite() {
                return Err(Error::invalid("montage", format!("sensor {name} has no direction")));
            }
            unit.push([p[0] / n, p[1] / n, p[2] / n]);
        }
        let mut used = vec![false; names.len()];
        for &(a, b) in &pairs {
            if a >= names.len() || b >= names.len() || a == b || used[a] || used[b] {
                return Err(Error::invalid("montage", format!("bad symmetry pair ({a}, {b})")));
            }
            used[a] = true;
            used[b] = true;
        }
        for i in 0..unit.len() {
            for j in 0..i {
                let d: f64 = (0..3).map(|k| (unit[i][k] - unit[j][k]).powi(2)).sum();
                if d < 1e-18 {
                    return Err(Error::contract(format!(
                        "sensors {} and {} coincide",
                        names[j], names[i]
                    )));
                }
            }
        }
        Ok(Self {
            names,
            positions: unit,
            pairs,
        })
    }

    /// Six 10-20 sensors: C3, C4, F3, F4, O1, O2, paired left/right.
    /// Axes: x towards the right ear, y towards the nose, z up.
    pub fn builtin() -> Self {
        let raw = [
            ("C3", [-0.707, 0.0, 0.707]),
            ("C4", [0.707, 0.0, 0.707]),
            ("F3", [-0.545, 0.673, 0.5]),
            ("F4", [0.545, 0.673, 0.5]),
            ("O1", [-0.309, -0.951, 0.0]),
            ("O2", [0.309, -0.951, 0.0]),
        ];
        Self::new(
            raw.iter().map(|(n, _)| n.to_string()).collect(),
            raw.iter().map(|(_, p)| *p).collect(),
            vec![(0, 1), (2, 3), (4, 5)],
        )
        .expect("built-in montage is valid")
    }

    /// Parses `name,x,y,z,pair` rows; `pair` names the mirrored sensor and is
    /// empty for midline sensors. Each pair may be listed from either side.
    pub fn from_csv_str(text: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let rows: Vec<Row> = rdr.deserialize().collect::<std::result::Result<_, _>>()?;
        let names: Vec<String> = rows.iter().map(|r| r.name.clone()).collect();
        let mut pairs = Vec::new();
        for (i, r) in rows.iter().enumerate() {
            let Some(other) = r.pair.as_deref().filter(|s| !s.is_empty()) else {
                continue;
            };
            let j = names
                .iter()
                .position(|n| n == other)
                .ok_or_else(|| Error::parse("pair", format!("unknown sensor {other} for {}", r.name)))?;
            let key = (i.min(j), i.max(j));
            if !pairs.contains(&key) {
                pairs.push(key);
            }
        }
        Self::new(names, rows.iter().map(|r| [r.x, r.y, r.z]).collect(), pairs)
    }

    pub fn from_csv(path: &Path) -> Result<Self> {
        Self::from_csv_str(&std::fs::read_to_string(path)?)
    }

    /// Restricts to (and reorders by) the given channel names.
    pub fn select(&self, channels: &[String]) -> Result<Self> {
        let idx = channels
            .iter()
            .map(|c| {
                self.index_of(c)
                    .ok_or_else(|| Error::contract(format!("channel {c} is not in the montage")))
            })
            .collect::<Result<Vec<_>>>()?;
        let pairs = self
            .pairs
            .iter()
            .filter_map(|&(a, b)| {
                let ia = idx.iter().position(|&i| i == a)?;
                let ib = idx.iter().position(|&i| i == b)?;
                Some((ia.min(ib), ia.max(ib)))
            })
            .collect();
        Self::new(
            channels.to_vec(),
            idx.iter().map(|&i| self.positions[i]).collect(),
            pairs,
        )
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn positions(&self) -> &[[f64; 3]] {
        &self.positions
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    /// Channel index map that swaps every symmetry pair.
    pub fn mirror_index(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        for &(a, b) in &self.pairs {
            idx.swap(a, b);
        }
        idx
    }
}
