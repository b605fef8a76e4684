//! Synthetic indoor scenes built from primitive assemblies. Tables and chairs
//! share identically distributed cylindrical legs, and the first chair always
//! stands next to the first table, so every scene contains look-alike parts
//! and a tight boundary between different classes.

mod io;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub use io::{
    format_scene, parse_scene, read_manifest, read_scene, write_manifest, write_scene,
    ManifestEntry, Split,
};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Template {
    /// Flat plane under everything.
    Floor,
    /// Top slab on four legs.
    Table,
    /// Seat slab, back slab and four legs.
    Chair,
    /// A few Gaussian blobs on the floor.
    Clutter,
}

impl Template {
    pub fn as_str(self) -> &'static str {
        match self {
            Template::Floor => "floor",
            Template::Table => "table",
            Template::Chair => "chair",
            Template::Clutter => "clutter",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "floor" => Ok(Template::Floor),
            "table" => Ok(Template::Table),
            "chair" => Ok(Template::Chair),
            "clutter" => Ok(Template::Clutter),
            _ => Err(Error::Config(format!(
                "unknown template '{s}' (floor|table|chair|clutter)"
            ))),
        }
    }

    /// Footprint half-extents in x and y before random jitter.
    fn half_extent(self) -> (f64, f64) {
        match self {
            Template::Floor => (0.0, 0.0),
            Template::Table => (0.5, 0.3),
            Template::Chair => (0.22, 0.22),
            Template::Clutter => (0.15, 0.15),
        }
    }
}

/// Part of an object a point was sampled from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Part {
    Floor,
    Leg,
    Top,
    Seat,
    Back,
    Blob,
}

pub const LEG_HEIGHT: (f64, f64) = (0.65, 0.75);
pub const LEG_RADIUS: (f64, f64) = (0.025, 0.035);

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    /// Template `i` is labeled class `i`.
    pub templates: Vec<Template>,
    pub classes: usize,
    pub objects: usize,
    pub points_per_object: usize,
    /// Gaussian coordinate noise, meters.
    pub noise: f64,
    /// Footprint gap between the first chair and first table, and the
    /// minimum gap between other objects. Negative values allow contact.
    pub gap: f64,
    /// Half-width of the square room, meters.
    pub room: f64,
    pub max_retries: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            templates: vec![Template::Floor, Template::Table, Template::Chair, Template::Clutter],
            classes: 4,
            objects: 8,
            points_per_object: 256,
            noise: 0.005,
            gap: 0.05,
            room: 1.75,
            max_retries: 200,
        }
    }
}

impl SceneSpec {
    /// One object per class with equal point counts.
    pub fn balanced(points_per_object: usize) -> Self {
        SceneSpec {
            objects: 4,
            points_per_object,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(format!(
                "a scene needs at least 2 classes, got {}",
                self.classes
            )));
        }
        if self.templates.is_empty() || self.templates.len() > self.classes {
            return Err(Error::Config(format!(
                "{} templates cannot map one-to-one into {} classes",
                self.templates.len(),
                self.classes
            )));
        }
        for (i, t) in self.templates.iter().enumerate() {
            if self.templates[..i].contains(t) {
                return Err(Error::Config(format!("template '{}' listed twice", t.as_str())));
            }
        }
        if self.objects == 0 || self.points_per_object == 0 {
            return Err(Error::Config("objects and points per object must be positive".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) || !self.gap.is_finite() {
            return Err(Error::Config("noise must be non-negative and gap finite".into()));
        }
        if !(self.room > 0.5 && self.room.is_finite()) {
            return Err(Error::Config(format!("room half-width {} too small", self.room)));
        }
        Ok(())
    }

    pub fn class_of(&self, t: Template) -> Option<usize> {
        self.templates.iter().position(|&x| x == t)
    }

    /// Templates of the objects in one scene, in placement order.
    fn object_templates(&self, rng: &mut ChaCha8Rng) -> Vec<Template> {
        let mut out: Vec<Template> = self.templates.iter().copied().take(self.objects).collect();
        let movable: Vec<Template> = self
            .templates
            .iter()
            .copied()
            .filter(|&t| t != Template::Floor)
            .collect();
        let pool = if movable.is_empty() { &self.templates } else { &movable };
        while out.len() < self.objects {
            out.push(*pool.choose(rng).expect("non-empty templates"));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledCloud {
    /// `[n × 3]` meters.
    pub coords: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl LabeledCloud {
    pub fn new(coords: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let (n, c) = coords.dims2()?;
        if c != 3 || labels.len() != n {
            return Err(Error::dim("LabeledCloud", coords.shape(), &[labels.len(), 3]));
        }
        if let Some(j) = labels.iter().position(|&l| l >= classes) {
            return Err(Error::Validation(format!(
                "row {j}: label {} out of range for {classes} classes",
                labels[j]
            )));
        }
        Ok(LabeledCloud {
            coords,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectRecord {
    pub template: Template,
    pub class: usize,
    pub center: [f64; 2],
    pub half_extent: [f64; 2],
}

#[derive(Clone, Debug, PartialEq)]
pub struct LegRecord {
    pub object: usize,
    pub class: usize,
    pub radius: f64,
    pub height: f64,
}

/// Generator bookkeeping for one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneMeta {
    pub objects: Vec<ObjectRecord>,
    pub legs: Vec<LegRecord>,
    /// Per point, the part it was sampled from.
    pub parts: Vec<Part>,
    /// Object pairs with different classes sharing a look-alike part.
    pub similar_pairs: Vec<(usize, usize)>,
    /// Object pairs with different classes whose footprints are within the gap.
    pub adjacent_pairs: Vec<(usize, usize)>,
}

fn footprint_gap(a: &ObjectRecord, b: &ObjectRecord) -> f64 {
    let dx = (a.center[0] - b.center[0]).abs() - a.half_extent[0] - b.half_extent[0];
    let dy = (a.center[1] - b.center[1]).abs() - a.half_extent[1] - b.half_extent[1];
    dx.max(dy)
}

struct Builder<'a> {
    rng: &'a mut ChaCha8Rng,
    coords: Vec<f64>,
    labels: Vec<usize>,
    parts: Vec<Part>,
}

impl Builder<'_> {
    fn push(&mut self, p: [f64; 3], label: usize, part: Part) {
        self.coords.extend_from_slice(&p);
        self.labels.push(label);
        self.parts.push(part);
    }

    fn slab(&mut self, n: usize, c: [f64; 3], half: [f64; 3], label: usize, part: Part) {
        for _ in 0..n {
            let p = [
                c[0] + self.rng.random_range(-half[0]..=half[0]),
                c[1] + self.rng.random_range(-half[1]..=half[1]),
                c[2] + self.rng.random_range(-half[2]..=half[2]),
            ];
            self.push(p, label, part);
        }
    }

    fn cylinder(&mut self, n: usize, base: [f64; 2], radius: f64, height: f64, label: usize) {
        for _ in 0..n {
            let a = self.rng.random_range(0.0..std::f64::consts::TAU);
            let z = self.rng.random_range(0.0..=height);
            self.push(
                [base[0] + radius * a.cos(), base[1] + radius * a.sin(), z],
                label,
                Part::Leg,
            );
        }
    }
}

fn split_counts(total: usize, weights: &[usize]) -> Vec<usize> {
    let w: usize = weights.iter().sum();
    let mut out: Vec<usize> = weights.iter().map(|x| total * x / w).collect();
    let mut rem = total - out.iter().sum::<usize>();
    let (mut i, len) = (0, out.len());
    while rem > 0 {
        out[i % len] += 1;
        rem -= 1;
        i += 1;
    }
    out
}

/// Samples one legged object; returns its leg records.
fn legged(
    b: &mut Builder<'_>,
    obj: &ObjectRecord,
    index: usize,
    n: usize,
    chair: bool,
) -> Vec<LegRecord> {
    let height = b.rng.random_range(LEG_HEIGHT.0..=LEG_HEIGHT.1);
    let radius = b.rng.random_range(LEG_RADIUS.0..=LEG_RADIUS.1);
    let [cx, cy] = obj.center;
    let [hx, hy] = obj.half_extent;
    let weights: &[usize] = if chair { &[1, 1, 1, 1, 3, 3] } else { &[1, 1, 1, 1, 6] };
    let counts = split_counts(n, weights);
    let inset = 0.05;
    let corners = [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)];
    let mut legs = Vec::with_capacity(4);
    for (k, (sx, sy)) in corners.iter().enumerate() {
        let base = [cx + sx * (hx - inset), cy + sy * (hy - inset)];
        b.cylinder(counts[k], base, radius, height, obj.class);
        legs.push(LegRecord {
            object: index,
            class: obj.class,
            radius,
            height,
        });
    }
    let thick = 0.02;
    if chair {
        b.slab(counts[4], [cx, cy, height + thick], [hx, hy, thick], obj.class, Part::Seat);
        let back_h = 0.22;
        b.slab(
            counts[5],
            [cx, cy + hy - thick, height + 2.0 * thick + back_h],
            [hx, thick, back_h],
            obj.class,
            Part::Back,
        );
    } else {
        b.slab(counts[4], [cx, cy, height + thick], [hx, hy, thick], obj.class, Part::Top);
    }
    legs
}

fn blobs(b: &mut Builder<'_>, obj: &ObjectRecord, n: usize) {
    let k = b.rng.random_range(2..=3);
    let counts = split_counts(n, &vec![1; k]);
    for c in counts {
        let center = [
            obj.center[0] + b.rng.random_range(-0.08..=0.08),
            obj.center[1] + b.rng.random_range(-0.08..=0.08),
            b.rng.random_range(0.05..=0.2),
        ];
        let spread = Normal::new(0.0, 0.04).expect("positive sigma");
        for _ in 0..c {
            let p = [
                center[0] + spread.sample(b.rng),
                center[1] + spread.sample(b.rng),
                (center[2] + spread.sample(b.rng)).max(0.0),
            ];
            b.push(p, obj.class, Part::Blob);
        }
    }
}

pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<LabeledCloud> {
    generate_scene_with_meta(spec, seed).map(|(c, _)| c)
}

pub fn generate_scene_with_meta(spec: &SceneSpec, seed: u64) -> Result<(LabeledCloud, SceneMeta)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let templates = spec.object_templates(&mut rng);

    // Placement.
    let mut objects: Vec<ObjectRecord> = Vec::with_capacity(templates.len());
    let mut first_table: Option<usize> = None;
    let mut first_chair_placed = false;
    for &t in &templates {
        let class = spec.class_of(t).expect("template from spec");
        if t == Template::Floor {
            objects.push(ObjectRecord {
                template: t,
                class,
                center: [0.0, 0.0],
                half_extent: [spec.room, spec.room],
            });
            continue;
        }
        let (bx, by) = t.half_extent();
        let jitter = rng.random_range(0.9..=1.1);
        let half = [bx * jitter, by * jitter];
        let blocking: Vec<&ObjectRecord> = objects.iter().filter(|o| o.template != Template::Floor).collect();
        let fits = |c: [f64; 2]| {
            let cand = ObjectRecord {
                template: t,
                class,
                center: c,
                half_extent: half,
            };
            c[0].abs() + half[0] <= spec.room
                && c[1].abs() + half[1] <= spec.room
                && blocking.iter().all(|o| footprint_gap(o, &cand) >= spec.gap - 1e-12)
        };

        let mut center = None;
        if t == Template::Chair && !first_chair_placed {
            if let Some(ti) = first_table {
                let table = &objects[ti];
                let x = table.center[0] + table.half_extent[0] + spec.gap + half[0];
                let mut tries = 0;
                while tries < spec.max_retries {
                    let dy = table.half_extent[1] - half[1];
                    let y = table.center[1] + rng.random_range(-dy.abs()..=dy.abs());
                    for c in [[x, y], [table.center[0] - (x - table.center[0]), y]] {
                        if center.is_none() && fits(c) {
                            center = Some(c);
                        }
                    }
                    if center.is_some() {
                        break;
                    }
                    tries += 1;
                }
            }
        }
        if center.is_none() {
            for _ in 0..spec.max_retries {
                let c = [
                    rng.random_range(-(spec.room - half[0])..=(spec.room - half[0])),
                    rng.random_range(-(spec.room - half[1])..=(spec.room - half[1])),
                ];
                if fits(c) {
                    center = Some(c);
                    break;
                }
            }
        }
        let Some(center) = center else {
            return Err(Error::Generation(format!(
                "could not place {} object {} of {} after {} tries",
                t.as_str(),
                objects.len(),
                templates.len(),
                spec.max_retries
            )));
        };
        if t == Template::Table && first_table.is_none() {
            first_table = Some(objects.len());
        }
        if t == Template::Chair {
            first_chair_placed = true;
        }
        objects.push(ObjectRecord {
            template: t,
            class,
            center,
            half_extent: half,
        });
    }

    // Sampling.
    let n = spec.objects * spec.points_per_object;
    let mut b = Builder {
        rng: &mut rng,
        coords: Vec::with_capacity(n * 3),
        labels: Vec::with_capacity(n),
        parts: Vec::with_capacity(n),
    };
    let mut legs = Vec::new();
    for (i, obj) in objects.iter().enumerate() {
        let m = spec.points_per_object;
        match obj.template {
            Template::Floor => b.slab(m, [0.0, 0.0, 0.0], [spec.room, spec.room, 0.0], obj.class, Part::Floor),
            Template::Table => legs.extend(legged(&mut b, obj, i, m, false)),
            Template::Chair => legs.extend(legged(&mut b, obj, i, m, true)),
            Template::Clutter => blobs(&mut b, obj, m),
        }
    }
    let Builder {
        mut coords,
        labels,
        parts,
        ..
    } = b;
    if spec.noise > 0.0 {
        let noise = Normal::new(0.0, spec.noise).expect("validated sigma");
        for v in coords.iter_mut() {
            *v += noise.sample(&mut rng);
        }
    }

    let mut similar_pairs = Vec::new();
    let mut adjacent_pairs = Vec::new();
    for i in 0..objects.len() {
        for j in i + 1..objects.len() {
            let (a, c) = (&objects[i], &objects[j]);
            if a.class == c.class {
                continue;
            }
            let legged = |t: Template| matches!(t, Template::Table | Template::Chair);
            if legged(a.template) && legged(c.template) {
                similar_pairs.push((i, j));
            }
            let floor_contact = a.template == Template::Floor || c.template == Template::Floor;
            if !floor_contact && footprint_gap(a, c) <= spec.gap.max(0.0) + 1e-9 {
                adjacent_pairs.push((i, j));
            }
        }
    }

    let cloud = LabeledCloud::new(Tensor::new(&[n, 3], coords)?, labels, spec.classes)?;
    Ok((
        cloud,
        SceneMeta {
            objects,
            legs,
            parts,
            similar_pairs,
            adjacent_pairs,
        },
    ))
}
