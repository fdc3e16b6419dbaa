//! Class-attribute tables, sample manifests and the synthetic benchmark
//! generator.
//!
//! Attribute table text format:
//!
//! ```text
//! classes=<n> seen=<n> attributes=<n> groups=<h> [normalized=<true|false>]
//! class <id> <name> : <attributes space-separated floats>
//! ...
//! group <gid> : <attribute indices>
//! ...
//! seen : <class ids>
//! unseen : <class ids>
//! ```
//!
//! Blank lines and lines starting with `#` are ignored. With
//! `normalized=false` each attribute column is min-max rescaled to `[0, 1]`
//! on load. The sample manifest is one `<split> <class-id> <image-seed>` line
//! per sample, where split is `train`, `test_seen` or `test_unseen`.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct AttributeTable {
    names: Vec<String>,
    prototypes: Vec<Vec<f64>>,
    groups: Vec<Vec<usize>>,
    seen: Vec<usize>,
    unseen: Vec<usize>,
}

impl AttributeTable {
    /// Validates and builds a table. Class ids are indices into `prototypes`.
    pub fn new(
        names: Vec<String>,
        prototypes: Vec<Vec<f64>>,
        groups: Vec<Vec<usize>>,
        mut seen: Vec<usize>,
        mut unseen: Vec<usize>,
    ) -> Result<Self> {
        let classes = prototypes.len();
        if classes == 0 {
            return Err(Error::Empty("class list"));
        }
        if names.len() != classes {
            return Err(Error::Config(format!("{} names for {classes} classes", names.len())));
        }
        let n_attr = prototypes[0].len();
        if n_attr == 0 {
            return Err(Error::Empty("attribute vector"));
        }
        for (c, p) in prototypes.iter().enumerate() {
            if p.len() != n_attr {
                return Err(Error::Config(format!("class {c} has {} attributes, expected {n_attr}", p.len())));
            }
            if p.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
                return Err(Error::Config(format!("class {c} has attribute values outside [0, 1]")));
            }
            if p.iter().all(|&v| v == 0.0) {
                return Err(Error::Config(format!("class {c} has an all-zero prototype")));
            }
        }
        let mut owner = vec![None; n_attr];
        for (g, members) in groups.iter().enumerate() {
            if members.is_empty() {
                return Err(Error::Config(format!("group {g} is empty")));
            }
            for &a in members {
                match owner.get_mut(a) {
                    None => return Err(Error::Config(format!("group {g} names attribute {a} out of range"))),
                    Some(Some(prev)) => {
                        return Err(Error::Config(format!("attribute {a} is in groups {prev} and {g}")))
                    }
                    Some(slot) => *slot = Some(g),
                }
            }
        }
        if let Some(a) = owner.iter().position(Option::is_none) {
            return Err(Error::Config(format!("attribute {a} belongs to no group")));
        }
        seen.sort_unstable();
        unseen.sort_unstable();
        let mut all = BTreeSet::new();
        for &c in seen.iter().chain(&unseen) {
            if c >= classes {
                return Err(Error::UnknownLabel(c));
            }
            if !all.insert(c) {
                return Err(Error::Config(format!("class {c} appears in both or twice in the splits")));
            }
        }
        if all.len() != classes {
            return Err(Error::Config("seen and unseen splits do not cover every class".into()));
        }
        Ok(AttributeTable {
            names,
            prototypes,
            groups,
            seen,
            unseen,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.prototypes.len()
    }

    pub fn num_attributes(&self) -> usize {
        self.prototypes[0].len()
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn prototype(&self, class: usize) -> &[f64] {
        &self.prototypes[class]
    }

    pub fn prototypes(&self) -> &[Vec<f64>] {
        &self.prototypes
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    /// Group index of every attribute.
    pub fn group_of(&self) -> Vec<usize> {
        let mut out = vec![0; self.num_attributes()];
        for (g, members) in self.groups.iter().enumerate() {
            for &a in members {
                out[a] = g;
            }
        }
        out
    }

    pub fn seen_ids(&self) -> &[usize] {
        &self.seen
    }

    pub fn unseen_ids(&self) -> &[usize] {
        &self.unseen
    }

    pub fn is_seen(&self, class: usize) -> bool {
        self.seen.binary_search(&class).is_ok()
    }

    /// `seen_mask()[c]` is true for seen classes.
    pub fn seen_mask(&self) -> Vec<bool> {
        (0..self.num_classes()).map(|c| self.is_seen(c)).collect()
    }

    /// Prototype matrix (classes × attributes) for the given ids, optionally
    /// L2-normalising each row.
    pub fn prototype_matrix(&self, ids: &[usize], l2: bool) -> Tensor {
        let rows: Vec<Vec<f64>> = ids
            .iter()
            .map(|&c| {
                let p = &self.prototypes[c];
                if l2 {
                    let n = p.iter().map(|v| v * v).sum::<f64>().sqrt();
                    p.iter().map(|v| v / n).collect()
                } else {
                    p.clone()
                }
            })
            .collect();
        Tensor::from_rows(&rows).expect("prototype rows have equal length")
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "classes={} seen={} attributes={} groups={}",
            self.num_classes(),
            self.seen.len(),
            self.num_attributes(),
            self.num_groups()
        );
        for (c, (name, p)) in self.names.iter().zip(&self.prototypes).enumerate() {
            let vals: Vec<String> = p.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(s, "class {c} {name} : {}", vals.join(" "));
        }
        for (g, members) in self.groups.iter().enumerate() {
            let idx: Vec<String> = members.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(s, "group {g} : {}", idx.join(" "));
        }
        let join = |ids: &[usize]| ids.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ");
        let _ = writeln!(s, "seen : {}", join(&self.seen));
        let _ = writeln!(s, "unseen : {}", join(&self.unseen));
        s
    }

    pub fn parse(text: &str, source_name: &str) -> Result<Self> {
        TableParser::new(source_name).parse(text)
    }
}

pub fn load_attribute_table(path: impl AsRef<Path>) -> Result<AttributeTable> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    AttributeTable::parse(&text, &path.display().to_string())
}

pub fn write_attribute_table(table: &AttributeTable, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, table.to_text())?;
    Ok(())
}

struct TableParser<'s> {
    source: &'s str,
}

struct Header {
    classes: usize,
    seen: usize,
    attributes: usize,
    groups: usize,
    normalized: bool,
}

impl<'s> TableParser<'s> {
    fn new(source: &'s str) -> Self {
        TableParser { source }
    }

    fn err<T>(&self, line: usize, msg: impl Into<String>) -> Result<T> {
        Err(Error::Parse {
            source_name: self.source.to_string(),
            line,
            msg: msg.into(),
        })
    }

    fn parse_header(&self, line_no: usize, line: &str) -> Result<Header> {
        let mut classes = None;
        let mut seen = None;
        let mut attributes = None;
        let mut groups = None;
        let mut normalized = true;
        for tok in line.split_whitespace() {
            let Some((k, v)) = tok.split_once('=') else {
                return self.err(line_no, format!("malformed header token `{tok}`"));
            };
            if k == "normalized" {
                normalized = match v {
                    "true" => true,
                    "false" => false,
                    _ => return self.err(line_no, format!("bad normalized flag `{v}`")),
                };
                continue;
            }
            let Ok(n) = v.parse::<usize>() else {
                return self.err(line_no, format!("bad header value `{tok}`"));
            };
            match k {
                "classes" => classes = Some(n),
                "seen" => seen = Some(n),
                "attributes" => attributes = Some(n),
                "groups" => groups = Some(n),
                _ => return self.err(line_no, format!("unknown header key `{k}`")),
            }
        }
        match (classes, seen, attributes, groups) {
            (Some(classes), Some(seen), Some(attributes), Some(groups)) => Ok(Header {
                classes,
                seen,
                attributes,
                groups,
                normalized,
            }),
            _ => self.err(line_no, "header must declare classes, seen, attributes and groups"),
        }
    }

    fn parse_ids(&self, line_no: usize, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace()
            .map(|t| t.parse::<usize>().or_else(|_| self.err(line_no, format!("bad integer `{t}`"))))
            .collect()
    }

    fn parse(&self, text: &str) -> Result<AttributeTable> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));

        let Some((hline, htext)) = lines.next() else {
            return self.err(1, "missing header");
        };
        let header = self.parse_header(hline, htext)?;

        let mut names: Vec<Option<String>> = vec![None; header.classes];
        let mut protos: Vec<Vec<f64>> = vec![Vec::new(); header.classes];
        let mut groups: Vec<Option<Vec<usize>>> = vec![None; header.groups];
        let mut seen = None;
        let mut unseen = None;
        let mut last_line = hline;

        for (no, line) in lines {
            last_line = no;
            let Some((lhs, rhs)) = line.split_once(':') else {
                return self.err(no, "expected `:` separator");
            };
            let head: Vec<&str> = lhs.split_whitespace().collect();
            match head.as_slice() {
                ["class", id, name] => {
                    let Ok(id) = id.parse::<usize>() else {
                        return self.err(no, format!("bad class id `{id}`"));
                    };
                    if id >= header.classes {
                        return self.err(no, format!("class id {id} out of range"));
                    }
                    if names[id].is_some() {
                        return self.err(no, format!("duplicate class id {id}"));
                    }
                    let vals: Vec<f64> = rhs
                        .split_whitespace()
                        .map(|t| t.parse::<f64>().or_else(|_| self.err(no, format!("bad float `{t}`"))))
                        .collect::<Result<_>>()?;
                    if vals.len() != header.attributes {
                        return self.err(
                            no,
                            format!("expected {} attribute values, found {}", header.attributes, vals.len()),
                        );
                    }
                    if vals.iter().any(|v| !v.is_finite()) {
                        return self.err(no, "non-finite attribute value");
                    }
                    if header.normalized && vals.iter().any(|v| !(0.0..=1.0).contains(v)) {
                        return self.err(no, "attribute value outside [0, 1] in a normalized table");
                    }
                    names[id] = Some(name.to_string());
                    protos[id] = vals;
                }
                ["group", gid] => {
                    let Ok(gid) = gid.parse::<usize>() else {
                        return self.err(no, format!("bad group id `{gid}`"));
                    };
                    if gid >= header.groups {
                        return self.err(no, format!("group id {gid} out of range"));
                    }
                    if groups[gid].is_some() {
                        return self.err(no, format!("duplicate group id {gid}"));
                    }
                    groups[gid] = Some(self.parse_ids(no, rhs)?);
                }
                ["seen"] => seen = Some(self.parse_ids(no, rhs)?),
                ["unseen"] => unseen = Some(self.parse_ids(no, rhs)?),
                _ => return self.err(no, format!("unrecognised line `{line}`")),
            }

            if let (Some(s), Some(u)) = (&seen, &unseen) {
                if let Some(c) = s.iter().find(|c| u.contains(c)) {
                    return self.err(no, format!("class {c} is in both seen and unseen splits"));
                }
            }
        }

        let end = last_line + 1;
        if let Some(c) = names.iter().position(Option::is_none) {
            return self.err(end, format!("class {c} missing"));
        }
        if let Some(g) = groups.iter().position(Option::is_none) {
            return self.err(end, format!("group {g} missing"));
        }
        let (Some(seen), Some(unseen)) = (seen, unseen) else {
            return self.err(end, "missing seen or unseen line");
        };
        if seen.len() != header.seen {
            return self.err(end, format!("header declares {} seen classes, found {}", header.seen, seen.len()));
        }
        if !header.normalized {
            minmax_columns(&mut protos);
        }
        AttributeTable::new(
            names.into_iter().map(Option::unwrap).collect(),
            protos,
            groups.into_iter().map(Option::unwrap).collect(),
            seen,
            unseen,
        )
        .or_else(|e| self.err(end, e.to_string()))
    }
}

fn minmax_columns(protos: &mut [Vec<f64>]) {
    let n = protos[0].len();
    for a in 0..n {
        let lo = protos.iter().map(|p| p[a]).fold(f64::INFINITY, f64::min);
        let hi = protos.iter().map(|p| p[a]).fold(f64::NEG_INFINITY, f64::max);
        for p in protos.iter_mut() {
            p[a] = if hi > lo { (p[a] - lo) / (hi - lo) } else { p[a].clamp(0.0, 1.0) };
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Sample {
    pub image_seed: u64,
    pub label: usize,
}

impl Sample {
    /// The instance's attribute vector: prototype plus seeded Gaussian jitter
    /// of standard deviation `noise`.
    pub fn attributes(&self, table: &AttributeTable, noise: f64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.image_seed);
        table
            .prototype(self.label)
            .iter()
            .map(|&v| {
                let z: f64 = rng.sample(StandardNormal);
                v + noise * z
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    TestSeen,
    TestUnseen,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::TestSeen => "test_seen",
            Split::TestUnseen => "test_unseen",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub table: AttributeTable,
    pub train: Vec<Sample>,
    pub test_seen: Vec<Sample>,
    pub test_unseen: Vec<Sample>,
}

impl Dataset {
    pub fn manifest_text(&self) -> String {
        let mut s = String::new();
        for (split, samples) in [
            (Split::Train, &self.train),
            (Split::TestSeen, &self.test_seen),
            (Split::TestUnseen, &self.test_unseen),
        ] {
            for x in samples {
                let _ = writeln!(s, "{} {} {}", split.as_str(), x.label, x.image_seed);
            }
        }
        s
    }

    /// Parses a manifest against `table`, checking split membership.
    pub fn from_manifest(table: AttributeTable, text: &str, source_name: &str) -> Result<Self> {
        let mut ds = Dataset {
            table,
            train: Vec::new(),
            test_seen: Vec::new(),
            test_unseen: Vec::new(),
        };
        let err = |line: usize, msg: String| Error::Parse {
            source_name: source_name.to_string(),
            line,
            msg,
        };
        for (i, line) in text.lines().enumerate() {
            let no = i + 1;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let toks: Vec<&str> = line.split_whitespace().collect();
            let [split, label, seed] = toks[..] else {
                return Err(err(no, "expected `<split> <class-id> <image-seed>`".into()));
            };
            let label: usize = label.parse().map_err(|_| err(no, format!("bad class id `{label}`")))?;
            let image_seed: u64 = seed.parse().map_err(|_| err(no, format!("bad seed `{seed}`")))?;
            if label >= ds.table.num_classes() {
                return Err(err(no, format!("unknown class id {label}")));
            }
            let seen = ds.table.is_seen(label);
            let sample = Sample { image_seed, label };
            match split {
                "train" if seen => ds.train.push(sample),
                "test_seen" if seen => ds.test_seen.push(sample),
                "test_unseen" if !seen => ds.test_unseen.push(sample),
                "train" | "test_seen" | "test_unseen" => {
                    return Err(err(no, format!("class {label} does not belong to split {split}")))
                }
                _ => return Err(err(no, format!("unknown split `{split}`"))),
            }
        }
        Ok(ds)
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        write_attribute_table(&self.table, dir.join(ATTRIBUTE_FILE))?;
        std::fs::write(dir.join(MANIFEST_FILE), self.manifest_text())?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let table = load_attribute_table(dir.join(ATTRIBUTE_FILE))?;
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path)?;
        Dataset::from_manifest(table, &text, &path.display().to_string())
    }
}

pub const ATTRIBUTE_FILE: &str = "attributes.txt";
pub const MANIFEST_FILE: &str = "manifest.txt";

/// Partitions samples by membership of their label in the seen split.
pub fn split_partition(table: &AttributeTable, samples: &[Sample]) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let mut seen = Vec::new();
    let mut unseen = Vec::new();
    for s in samples {
        if s.label >= table.num_classes() {
            return Err(Error::UnknownLabel(s.label));
        }
        if table.is_seen(s.label) {
            seen.push(*s);
        } else {
            unseen.push(*s);
        }
    }
    Ok((seen, unseen))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub seen: usize,
    pub attributes: usize,
    pub groups: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Intra-class noise: std of attribute jitter and patch clutter.
    pub noise: f64,
    /// Scale of the attribute signal injected into patches.
    pub signal: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            classes: 20,
            seen: 15,
            attributes: 12,
            groups: 3,
            train_per_class: 30,
            test_per_class: 10,
            noise: 0.3,
            signal: 1.0,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.seen == 0 || self.seen >= self.classes {
            return Err(Error::Config(format!(
                "seen ({}) must be in 1..classes ({})",
                self.seen, self.classes
            )));
        }
        if self.groups == 0 || self.groups > self.attributes {
            return Err(Error::Config(format!(
                "groups ({}) must be in 1..=attributes ({})",
                self.groups, self.attributes
            )));
        }
        if !(self.noise >= 0.0) || !self.signal.is_finite() {
            return Err(Error::Config("noise must be >= 0 and signal finite".into()));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::Config("per-class sample counts must be positive".into()));
        }
        Ok(())
    }
}

/// Contiguous partition of `n` attributes into `h` groups whose sizes differ
/// by at most one.
pub fn contiguous_groups(n: usize, h: usize) -> Vec<Vec<usize>> {
    let base = n / h;
    let extra = n % h;
    let mut start = 0;
    (0..h)
        .map(|g| {
            let len = base + usize::from(g < extra);
            let v: Vec<usize> = (start..start + len).collect();
            start += len;
            v
        })
        .collect()
}

/// SplitMix64 finaliser.
pub(crate) fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn image_seed(seed: u64, split: Split, class: usize, index: usize) -> u64 {
    let tag = match split {
        Split::Train => 1u64,
        Split::TestSeen => 2,
        Split::TestUnseen => 3,
    };
    mix64(mix64(mix64(seed) ^ tag) ^ ((class as u64) << 32 | index as u64))
}

/// Builds a synthetic GZSL benchmark. Within every group each class
/// activates a random non-empty subset of attributes at strength
/// `U(0.5, 1.0)`; the rest take `U(0, 0.1)`. Activation patterns are unique
/// per class.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let groups = contiguous_groups(spec.attributes, spec.groups);

    let mut ids: Vec<usize> = (0..spec.classes).collect();
    ids.shuffle(&mut rng);
    let seen: Vec<usize> = ids[..spec.seen].to_vec();
    let unseen: Vec<usize> = ids[spec.seen..].to_vec();

    let mut masks: Vec<Vec<bool>> = Vec::with_capacity(spec.classes);
    let mut prototypes = Vec::with_capacity(spec.classes);
    for _ in 0..spec.classes {
        let mut attempts = 0;
        let mask = loop {
            let mut mask = vec![false; spec.attributes];
            for members in &groups {
                loop {
                    for &a in members {
                        mask[a] = rng.gen_bool(0.5);
                    }
                    if members.iter().any(|&a| mask[a]) {
                        break;
                    }
                }
            }
            attempts += 1;
            if !masks.contains(&mask) || attempts > 1000 {
                break mask;
            }
        };
        let proto: Vec<f64> = mask
            .iter()
            .map(|&on| if on { rng.gen_range(0.5..1.0) } else { rng.gen_range(0.0..0.1) })
            .collect();
        masks.push(mask);
        prototypes.push(proto);
    }
    let names = (0..spec.classes).map(|c| format!("class_{c:03}")).collect();
    let table = AttributeTable::new(names, prototypes, groups, seen, unseen)?;

    let draw = |split: Split, classes: &[usize], per: usize| -> Vec<Sample> {
        classes
            .iter()
            .flat_map(|&c| {
                (0..per).map(move |i| Sample {
                    image_seed: image_seed(spec.seed, split, c, i),
                    label: c,
                })
            })
            .collect()
    };
    Ok(Dataset {
        train: draw(Split::Train, table.seen_ids(), spec.train_per_class),
        test_seen: draw(Split::TestSeen, table.seen_ids(), spec.test_per_class),
        test_unseen: draw(Split::TestUnseen, table.unseen_ids(), spec.test_per_class),
        table,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::cosine_similarity;

    fn header_only_table(classes: usize, seen: usize, attrs: usize, groups: usize) -> String {
        let mut s = format!("classes={classes} seen={seen} attributes={attrs} groups={groups}\n");
        for c in 0..classes {
            let vals: Vec<String> = (0..attrs).map(|a| if (a + c) % 3 == 0 { "0.9".into() } else { "0.05".into() }).collect();
            s += &format!("class {c} c{c} : {}\n", vals.join(" "));
        }
        for (g, m) in contiguous_groups(attrs, groups).iter().enumerate() {
            s += &format!("group {g} : {}\n", m.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" "));
        }
        let seen_ids: Vec<String> = (0..seen).map(|v| v.to_string()).collect();
        let unseen_ids: Vec<String> = (seen..classes).map(|v| v.to_string()).collect();
        s += &format!("seen : {}\nunseen : {}\n", seen_ids.join(" "), unseen_ids.join(" "));
        s
    }

    #[test]
    fn benchmark_shaped_headers_accepted() {
        let cub = AttributeTable::parse(&header_only_table(200, 150, 312, 28), "cub").unwrap();
        assert_eq!((cub.num_classes(), cub.seen_ids().len(), cub.num_attributes(), cub.num_groups()), (200, 150, 312, 28));
        let awa = AttributeTable::parse(&header_only_table(50, 40, 85, 9), "awa2").unwrap();
        assert_eq!((awa.num_classes(), awa.unseen_ids().len(), awa.num_attributes(), awa.num_groups()), (50, 10, 85, 9));
    }

    #[test]
    fn overlapping_splits_rejected_with_line() {
        let text = header_only_table(4, 2, 3, 1).replace("unseen : 2 3", "unseen : 1 2 3");
        match AttributeTable::parse(&text, "t") {
            Err(Error::Parse { line, msg, .. }) => {
                assert_eq!(line, 8);
                assert!(msg.contains("both"), "{msg}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_rows_rejected() {
        let base = header_only_table(4, 2, 3, 1);
        let short = base.replace("class 1 c1 : 0.05 0.05 0.9", "class 1 c1 : 0.05 0.05");
        assert!(matches!(AttributeTable::parse(&short, "t"), Err(Error::Parse { line: 3, .. })));
        let junk = base.replace("group 0", "grp 0");
        assert!(matches!(AttributeTable::parse(&junk, "t"), Err(Error::Parse { .. })));
        let out_of_range = base.replace("class 1 c1 : 0.05", "class 1 c1 : 1.5");
        assert!(matches!(AttributeTable::parse(&out_of_range, "t"), Err(Error::Parse { line: 3, .. })));
    }

    #[test]
    fn unnormalized_tables_are_rescaled() {
        let text = "classes=2 seen=1 attributes=2 groups=1 normalized=false\n\
                    class 0 a : 10 3\nclass 1 b : 20 1\ngroup 0 : 0 1\nseen : 0\nunseen : 1\n";
        let t = AttributeTable::parse(text, "t").unwrap();
        assert_eq!(t.prototype(0), &[0.0, 1.0]);
        assert_eq!(t.prototype(1), &[1.0, 0.0]);
    }

    #[test]
    fn round_trip_through_text() {
        let ds = generate_synthetic(&SyntheticSpec::default()).unwrap();
        let back = AttributeTable::parse(&ds.table.to_text(), "rt").unwrap();
        assert_eq!(back, ds.table);
        let man = Dataset::from_manifest(back, &ds.manifest_text(), "m").unwrap();
        assert_eq!(man, ds);
    }

    #[test]
    fn generator_is_deterministic() {
        let spec = SyntheticSpec {
            classes: 20,
            seen: 15,
            attributes: 12,
            groups: 3,
            seed: 7,
            ..SyntheticSpec::default()
        };
        let a = generate_synthetic(&spec).unwrap();
        let b = generate_synthetic(&spec).unwrap();
        assert_eq!(a.table.to_text(), b.table.to_text());
        assert_eq!(a.manifest_text(), b.manifest_text());
    }

    #[test]
    fn unseen_samples_carry_unseen_labels() {
        let ds = generate_synthetic(&SyntheticSpec::default()).unwrap();
        assert!(ds.test_unseen.iter().all(|s| !ds.table.is_seen(s.label)));
        assert!(ds.train.iter().chain(&ds.test_seen).all(|s| ds.table.is_seen(s.label)));
    }

    fn nearest_prototype(table: &AttributeTable, x: &[f64]) -> usize {
        let mut best = (f64::NEG_INFINITY, 0);
        for c in 0..table.num_classes() {
            let s = cosine_similarity(x, table.prototype(c)).unwrap();
            if s > best.0 {
                best = (s, c);
            }
        }
        best.1
    }

    fn oracle_accuracy(spec: &SyntheticSpec) -> f64 {
        let ds = generate_synthetic(spec).unwrap();
        let all: Vec<&Sample> = ds.test_seen.iter().chain(&ds.test_unseen).collect();
        let hits = all
            .iter()
            .filter(|s| nearest_prototype(&ds.table, &s.attributes(&ds.table, spec.noise)) == s.label)
            .count();
        hits as f64 / all.len() as f64
    }

    #[test]
    fn noiseless_instances_classified_perfectly() {
        for seed in 0..5 {
            let spec = SyntheticSpec {
                noise: 0.0,
                seed,
                ..SyntheticSpec::default()
            };
            assert_eq!(oracle_accuracy(&spec), 1.0);
        }
    }

    #[test]
    fn more_noise_never_helps_the_oracle() {
        let mut prev = f64::INFINITY;
        for noise in [0.0, 0.1, 0.2, 0.4, 0.8] {
            let acc: f64 = (0..5)
                .map(|seed| {
                    oracle_accuracy(&SyntheticSpec {
                        noise,
                        seed,
                        ..SyntheticSpec::default()
                    })
                })
                .sum::<f64>()
                / 5.0;
            assert!(acc <= prev, "noise {noise}: {acc} > {prev}");
            prev = acc;
        }
    }

    #[test]
    fn split_partition_cases() {
        let ds = generate_synthetic(&SyntheticSpec::default()).unwrap();
        let (s, u) = split_partition(&ds.table, &ds.test_seen).unwrap();
        assert_eq!((s.len(), u.len()), (ds.test_seen.len(), 0));
        let (s, u) = split_partition(&ds.table, &[]).unwrap();
        assert!(s.is_empty() && u.is_empty());
        let mixed: Vec<Sample> = ds.test_seen[..6].iter().chain(&ds.test_unseen[..4]).copied().collect();
        let (s, u) = split_partition(&ds.table, &mixed).unwrap();
        assert_eq!((s.len(), u.len()), (6, 4));
        let bad = [Sample { image_seed: 0, label: 99 }];
        assert!(matches!(split_partition(&ds.table, &bad), Err(Error::UnknownLabel(99))));
    }
}
