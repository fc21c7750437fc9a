//! The SimpleScenes dataset: ambiguous layouts paired with templated,
//! region-annotated prompts.
//!
//! Template text is written in the annotated prompt syntax with `$NAME`
//! placeholders. `$S` expands to the tag of the next object slot of the
//! layout. Placeholders drawn from the same set at top level are sampled
//! without replacement; placeholders nested inside a drawn value (the colours
//! in `"a $C tennis ball"`) are drawn independently. `$D1`/`$D2` pick one
//! tuple of `D`, take its first element, then one of its second.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore};
use thiserror::Error;

use crate::image::{ImageError, RgbImage};
use crate::layout_file::{masks_from_rle, masks_to_rle, LayoutFile, LayoutFileError, Provenance};
use crate::region::{
    build_alignment, parse_annotated_prompt, whitespace_token_spans, AnnotatedPrompt, RegionError,
    RegionLayout,
};
use crate::rng::{split_mix, SplitMix64};

pub const CANVAS: usize = 512;
/// Attempts per example before giving up on finding an unseen one.
pub const MAX_RESAMPLES: usize = 10_000;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error(
        "template {template}: set `{set}` has {available} values, {needed} distinct draws needed"
    )]
    SetTooSmall {
        template: String,
        set: String,
        needed: usize,
        available: usize,
    },
    #[error("template {template}: unknown placeholder `${name}`")]
    UnknownPlaceholder { template: String, name: String },
    #[error("template {template}: more `$S` slots than layout slots")]
    OutOfSlots { template: String },
    #[error("template {template}: only {found} of {needed} unique examples after resampling")]
    ExhaustedUniqueSpace {
        template: String,
        needed: usize,
        found: usize,
    },
    #[error("unknown layout `{0}`")]
    UnknownLayout(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Layout(#[from] LayoutFileError),
    #[error(transparent)]
    Region(#[from] RegionError),
    #[error(transparent)]
    Image(#[from] ImageError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SceneError + '_ {
    move |source| SceneError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// A `$X1` value and the `$X2` choices that go with it.
pub type TupleEntry = (String, Vec<String>);

#[derive(Debug, Clone, PartialEq)]
pub struct TemplateSpec {
    pub id: String,
    pub text: String,
    pub sets: Vec<(String, Vec<String>)>,
    pub tuples: Vec<(String, Vec<TupleEntry>)>,
    /// Candidate layouts; one is picked uniformly per example.
    pub layout_ids: Vec<String>,
    /// Region tags consumed in order by `$S`.
    pub slots: Vec<String>,
    /// Permute `slots` per example.
    pub shuffle_slots: bool,
    /// Draw same-set placeholders with replacement.
    pub allow_repeats: bool,
    pub example_count: usize,
}

fn strings(values: &[&str]) -> Vec<String> {
    values.iter().map(|s| s.to_string()).collect()
}

fn set(name: &str, values: &[&str]) -> (String, Vec<String>) {
    (name.to_string(), strings(values))
}

const TABLE_OR_GRASS: &[&str] = &["a wooden table", "grass"];

pub fn builtin_templates() -> Vec<TemplateSpec> {
    let tpl = |id: &str, text: &str, layouts: &[&str], slots: &[&str], count: usize| TemplateSpec {
        id: id.to_string(),
        text: text.to_string(),
        sets: Vec::new(),
        tuples: Vec::new(),
        layout_ids: strings(layouts),
        slots: strings(slots),
        shuffle_slots: false,
        allow_repeats: false,
        example_count: count,
    };
    let circles = ["LEFT", "CENTER", "RIGHT"];
    let triangle = ["TOP_LEFT", "BOTTOM", "TOP_RIGHT"];

    let rabbit = tpl(
        "rabbit_mage",
        "a digital art of {a rabbit mage:MAGE} standing on {clouds:CLOUDS} casting {a fire ball:FIREBALL}. Background is {a blue sky:BG}.",
        &["rabbit_left", "rabbit_right"],
        &[],
        2,
    );
    let mut still_life = tpl(
        "coin_crystal_tennis",
        "a highly detailed photorealistic image of {a gold coin:$S}, {a blue crystal ball:$S} and {a red tennis ball:$S} on {a wooden table:BG}.",
        &["three_circles"],
        &circles,
        2,
    );
    still_life.shuffle_slots = true;
    let mut orange_like = tpl(
        "orange_like_fruits",
        "a highly detailed photorealistic image of {$A:$S}, {$A:$S} and {$A:$S} on {a wooden table:BG}",
        &["triangle_fruits"],
        &triangle,
        20,
    );
    orange_like.sets = vec![set(
        "A",
        &["an orange", "a pumpkin", "an apricot", "a persimmon"],
    )];
    let mut balls = tpl(
        "coloured_balls",
        "a highly detailed photorealistic image of {$A:$S}, {$A:$S} and {$A:$S} on {$B:BG}",
        &["three_circles"],
        &circles,
        20,
    );
    balls.sets = vec![
        set("C", &["red", "blue", "yellow"]),
        set(
            "A",
            &[
                "a $C crystal ball",
                "a $C tennis ball",
                "a $C ping pong ball",
            ],
        ),
        set("B", TABLE_OR_GRASS),
    ];
    let mut plain_balls = tpl(
        "plain_balls",
        "a highly detailed photorealistic image of {a $C ball:$S}, {a $C ball:$S} and {a $C ball:$S} on {$B:BG}",
        &["three_circles"],
        &circles,
        20,
    );
    plain_balls.sets = vec![
        set("C", &["red", "blue", "green", "pink", "white", "yellow"]),
        set("B", TABLE_OR_GRASS),
    ];
    let mut fruits = tpl(
        "fruits",
        "a highly detailed photorealistic image of {$A:$S}, {$A:$S} and {$A:$S} on {$B:BG}",
        &["triangle_fruits"],
        &triangle,
        20,
    );
    fruits.sets = vec![
        set(
            "A",
            &[
                "an orange",
                "a red apple",
                "a green apple",
                "a watermelon",
                "a kiwi",
                "a chestnut",
                "a walnut",
                "a peach",
                "a grape",
            ],
        ),
        set("B", TABLE_OR_GRASS),
    ];
    let mut stacked = tpl(
        "stacked_boxes",
        "a photo of {$A:$S} on top of {$A:$S}, and to the right {$A:$S} falling on {$A:$S}. Background is {$B:BG}.",
        &["four_boxes"],
        &["TOP_LEFT", "BOTTOM_LEFT", "TOP_RIGHT", "BOTTOM_RIGHT"],
        20,
    );
    stacked.sets = vec![
        set(
            "A",
            &[
                "an old-school tv",
                "a cardboard box",
                "a square watermelon",
                "a concrete block",
                "spongebob",
                "a yellow book",
                "a washing machine",
                "a gopro camera",
            ],
        ),
        set("B", &["a lush forest", "a brick wall", "a living room"]),
    ];
    let mut object = tpl(
        "object_sky",
        "a photo of {$A:OBJECT} {$B:GROUND} Background is {$D1:BG} with {$D2:ORB}.",
        &["object_scene"],
        &[],
        20,
    );
    object.sets = vec![
        set(
            "A",
            &["a doll house", "a container ship", "an old shack", "a car"],
        ),
        set(
            "B",
            &[
                "in the desert",
                "floating in the sea",
                "standing on the ground",
                "standing on grass",
            ],
        ),
    ];
    object.tuples = vec![(
        "D".to_string(),
        vec![
            (
                "a dark starry night sky".to_string(),
                strings(&["the moon", "a blood red moon", "a hot air balloon"]),
            ),
            (
                "a blue sky".to_string(),
                strings(&["the sun", "the moon", "a hot air balloon", "the death star"]),
            ),
            (
                "a lush green forest".to_string(),
                strings(&["a magical fire orb", "a red balloon"]),
            ),
        ],
    )];
    vec![
        rabbit,
        still_life,
        orange_like,
        balls,
        plain_balls,
        fruits,
        stacked,
        object,
    ]
}

pub fn builtin_layout_ids() -> &'static [&'static str] {
    &[
        "rabbit_left",
        "rabbit_right",
        "three_circles",
        "triangle_fruits",
        "four_boxes",
        "object_scene",
    ]
}

pub fn builtin_layout(id: &str) -> Result<LayoutFile, SceneError> {
    let text = match id {
        "rabbit_left" => include_str!("../layouts/rabbit_left.json"),
        "rabbit_right" => include_str!("../layouts/rabbit_right.json"),
        "three_circles" => include_str!("../layouts/three_circles.json"),
        "triangle_fruits" => include_str!("../layouts/triangle_fruits.json"),
        "four_boxes" => include_str!("../layouts/four_boxes.json"),
        "object_scene" => include_str!("../layouts/object_scene.json"),
        _ => return Err(SceneError::UnknownLayout(id.to_string())),
    };
    Ok(LayoutFile::from_json(text)?)
}

/// A filled-in template, before rasterization.
#[derive(Debug, Clone, PartialEq)]
pub struct Instantiation {
    pub layout_id: String,
    pub prompt: AnnotatedPrompt,
    pub draws: Vec<(String, String)>,
}

fn split_placeholder(text: &str, at: usize) -> (String, usize) {
    let name: String = text[at..]
        .chars()
        .take_while(|c| c.is_ascii_uppercase() || c.is_ascii_digit())
        .collect();
    let len = name.len();
    (name, at + len)
}

/// Counts top-level uses of each set, for the without-replacement check.
fn top_level_uses(text: &str) -> HashMap<String, usize> {
    let mut uses = HashMap::new();
    let mut i = 0;
    while let Some(off) = text[i..].find('$') {
        let (name, next) = split_placeholder(text, i + off + 1);
        *uses.entry(name).or_insert(0) += 1;
        i = next;
    }
    uses
}

struct Filler<'a, R: Rng> {
    spec: &'a TemplateSpec,
    rng: &'a mut R,
    pools: HashMap<String, Vec<String>>,
    tuple: HashMap<String, usize>,
    slots: std::vec::IntoIter<String>,
    draws: Vec<(String, String)>,
}

impl<R: Rng> Filler<'_, R> {
    fn set_values(&self, name: &str) -> Option<&Vec<String>> {
        self.spec
            .sets
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v)
    }

    fn unknown(&self, name: &str) -> SceneError {
        SceneError::UnknownPlaceholder {
            template: self.spec.id.clone(),
            name: name.to_string(),
        }
    }

    fn expand(&mut self, text: &str, nested: bool) -> Result<String, SceneError> {
        let mut out = String::with_capacity(text.len());
        let mut i = 0;
        while let Some(off) = text[i..].find('$') {
            out.push_str(&text[i..i + off]);
            let (name, next) = split_placeholder(text, i + off + 1);
            let value = self.draw(&name, nested)?;
            out.push_str(&value);
            i = next;
        }
        out.push_str(&text[i..]);
        Ok(out)
    }

    fn draw(&mut self, name: &str, nested: bool) -> Result<String, SceneError> {
        if name == "S" {
            return self.slots.next().ok_or_else(|| SceneError::OutOfSlots {
                template: self.spec.id.clone(),
            });
        }
        if let Some(values) = self.set_values(name) {
            let raw = if nested || self.spec.allow_repeats {
                let values = values.clone();
                values[self.rng.random_range(0..values.len())].clone()
            } else {
                let pool = self.pools.get_mut(name).expect("pool per set");
                let k = self.rng.random_range(0..pool.len());
                pool.remove(k)
            };
            let value = self.expand(&raw, true)?;
            self.draws.push((name.to_string(), value.clone()));
            return Ok(value);
        }
        let (base, part) = name.split_at(name.len().saturating_sub(1));
        let spec = self.spec;
        let tuples = spec
            .tuples
            .iter()
            .find(|(n, _)| n == base)
            .map(|(_, t)| t)
            .ok_or_else(|| self.unknown(name))?;
        let index = *self
            .tuple
            .entry(base.to_string())
            .or_insert_with(|| self.rng.random_range(0..tuples.len()));
        let (first, second) = &tuples[index];
        let value = match part {
            "1" => first.clone(),
            "2" => second[self.rng.random_range(0..second.len())].clone(),
            _ => return Err(self.unknown(name)),
        };
        self.draws.push((name.to_string(), value.clone()));
        Ok(value)
    }
}

/// Fills one template from `rng`.
pub fn instantiate_template<R: Rng>(
    spec: &TemplateSpec,
    rng: &mut R,
) -> Result<Instantiation, SceneError> {
    for (name, needed) in top_level_uses(&spec.text)
        .into_iter()
        .filter(|_| !spec.allow_repeats)
    {
        if let Some((_, values)) = spec.sets.iter().find(|(n, _)| *n == name) {
            if values.len() < needed {
                return Err(SceneError::SetTooSmall {
                    template: spec.id.clone(),
                    set: name,
                    needed,
                    available: values.len(),
                });
            }
        }
    }
    let layout_id = spec.layout_ids[rng.random_range(0..spec.layout_ids.len())].clone();
    let mut slots = spec.slots.clone();
    if spec.shuffle_slots {
        slots.shuffle(rng);
    }
    let mut filler = Filler {
        spec,
        rng,
        pools: spec.sets.iter().cloned().collect(),
        tuple: HashMap::new(),
        slots: slots.into_iter(),
        draws: Vec::new(),
    };
    let raw = filler.expand(&spec.text, false)?;
    let draws = filler.draws;
    Ok(Instantiation {
        layout_id,
        prompt: parse_annotated_prompt(&raw)?,
        draws,
    })
}

/// A rasterized layout with its segmentation image.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterizedLayout {
    pub layout: RegionLayout,
    pub segmap: RgbImage,
    /// One colour per region, in region order.
    pub colors: Vec<[u8; 3]>,
}

/// Rasterizes `spec` at `h × w` and paints each region a distinct random
/// colour. Pixels outside every region stay black, and black is never drawn.
pub fn rasterize_layout<R: RngCore>(
    spec: &LayoutFile,
    h: usize,
    w: usize,
    rng: &mut R,
) -> Result<RasterizedLayout, SceneError> {
    let layout = spec.to_layout_at(h, w)?;
    let mut colors: Vec<[u8; 3]> = Vec::with_capacity(layout.n_regions());
    while colors.len() < layout.n_regions() {
        let v = rng.next_u64();
        let c = [v as u8, (v >> 8) as u8, (v >> 16) as u8];
        if c != [0, 0, 0] && !colors.contains(&c) {
            colors.push(c);
        }
    }
    let mut segmap = RgbImage::filled(h, w, [0, 0, 0]);
    for (region, color) in layout.regions().iter().zip(&colors) {
        for (p, &v) in region.mask.data().iter().enumerate() {
            if v > 0.5 {
                segmap.set(p / w, p % w, *color);
            }
        }
    }
    Ok(RasterizedLayout {
        layout,
        segmap,
        colors,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimpleScenesExample {
    pub example_id: String,
    pub layout: RegionLayout,
    pub prompt: AnnotatedPrompt,
    pub segmap: RgbImage,
    pub colors: Vec<[u8; 3]>,
    pub provenance: Provenance,
}

impl SimpleScenesExample {
    /// Checks that the prompt's tags all resolve and every region is usable.
    pub fn check(&self) -> Result<(), SceneError> {
        let reparsed = parse_annotated_prompt(&self.prompt.raw)?;
        let tokens = whitespace_token_spans(&reparsed.plain);
        let alignment = build_alignment(&reparsed, &tokens, &self.layout.tag_map())?;
        alignment.validate(self.layout.n_regions())?;
        Ok(())
    }
}

/// Generates every template's examples from a single SplitMix64 stream.
pub fn generate_dataset(seed: u64) -> Result<Vec<SimpleScenesExample>, SceneError> {
    generate_dataset_with(seed, false)
}

/// [`generate_dataset`], optionally letting one example repeat an object.
pub fn generate_dataset_with(
    seed: u64,
    allow_repeats: bool,
) -> Result<Vec<SimpleScenesExample>, SceneError> {
    let mut templates = builtin_templates();
    for t in &mut templates {
        t.allow_repeats = allow_repeats;
    }
    generate_from_templates(&templates, seed)
}

pub fn generate_from_templates(
    templates: &[TemplateSpec],
    seed: u64,
) -> Result<Vec<SimpleScenesExample>, SceneError> {
    let mut rng = split_mix(seed);
    let mut layouts: HashMap<String, LayoutFile> = HashMap::new();
    let mut out = Vec::new();
    for spec in templates {
        let mut seen = HashSet::new();
        let mut accepted = Vec::with_capacity(spec.example_count);
        let mut attempts = 0;
        while accepted.len() < spec.example_count {
            if attempts == MAX_RESAMPLES * spec.example_count {
                return Err(SceneError::ExhaustedUniqueSpace {
                    template: spec.id.clone(),
                    needed: spec.example_count,
                    found: accepted.len(),
                });
            }
            attempts += 1;
            let inst = instantiate_template(spec, &mut rng)?;
            if seen.insert((inst.layout_id.clone(), inst.prompt.raw.clone())) {
                accepted.push(inst);
            }
        }
        for inst in accepted {
            if !layouts.contains_key(&inst.layout_id) {
                layouts.insert(inst.layout_id.clone(), builtin_layout(&inst.layout_id)?);
            }
            let raster = rasterize_layout(&layouts[&inst.layout_id], CANVAS, CANVAS, &mut rng)?;
            let example = SimpleScenesExample {
                example_id: format!("ex_{:03}", out.len()),
                layout: raster.layout,
                prompt: inst.prompt,
                segmap: raster.segmap,
                colors: raster.colors,
                provenance: Provenance {
                    template_id: spec.id.clone(),
                    layout_id: inst.layout_id,
                    example_seed: rng.next_u64(),
                    draws: inst.draws,
                },
            };
            example.check()?;
            out.push(example);
        }
    }
    Ok(out)
}

/// Per-template example counts, in template order.
pub fn template_counts(examples: &[SimpleScenesExample], templates: &[TemplateSpec]) -> Vec<usize> {
    templates
        .iter()
        .map(|t| {
            examples
                .iter()
                .filter(|e| e.provenance.template_id == t.id)
                .count()
        })
        .collect()
}

/// Writes one directory per example: `layout.json`, `prompt.txt`,
/// `segmap.ppm` and `masks.rle`.
pub fn write_dataset(examples: &[SimpleScenesExample], out: &Path) -> Result<(), SceneError> {
    fs::create_dir_all(out).map_err(io_err(out))?;
    for ex in examples {
        write_example(ex, &out.join(&ex.example_id))?;
    }
    Ok(())
}

pub fn write_example(ex: &SimpleScenesExample, dir: &Path) -> Result<(), SceneError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut file = LayoutFile::from_layout(&ex.layout);
    file.name = Some(ex.example_id.clone());
    file.provenance = Some(ex.provenance.clone());
    let writes: [(&str, Vec<u8>); 4] = [
        ("layout.json", (file.to_json() + "\n").into_bytes()),
        ("prompt.txt", format!("{}\n", ex.prompt.raw).into_bytes()),
        ("segmap.ppm", ex.segmap.to_ppm()),
        ("masks.rle", masks_to_rle(&ex.layout).into_bytes()),
    ];
    for (name, bytes) in writes {
        let path = dir.join(name);
        fs::write(&path, bytes).map_err(io_err(&path))?;
    }
    Ok(())
}

/// An example as read back from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedExample {
    pub name: Option<String>,
    pub layout: RegionLayout,
    pub prompt: AnnotatedPrompt,
    pub segmap: Option<RgbImage>,
    pub provenance: Option<Provenance>,
}

/// Reads an example directory. `masks.rle`, when present, must agree with
/// `layout.json`; `segmap.ppm` is optional.
pub fn read_example(dir: &Path) -> Result<LoadedExample, SceneError> {
    let read = |name: &str| {
        let path = dir.join(name);
        fs::read(&path).map_err(io_err(&path))
    };
    let file = LayoutFile::from_json(&String::from_utf8_lossy(&read("layout.json")?))?;
    let layout = file.to_layout()?;
    let rle_path = dir.join("masks.rle");
    if rle_path.exists() {
        let text = String::from_utf8_lossy(&read("masks.rle")?).into_owned();
        if masks_from_rle(&text, layout.is_partitioning())? != layout {
            return Err(LayoutFileError::Rle("masks.rle disagrees with layout.json".into()).into());
        }
    }
    let prompt_text = String::from_utf8_lossy(&read("prompt.txt")?).into_owned();
    let prompt = parse_annotated_prompt(prompt_text.trim_end_matches(['\n', '\r']))?;
    let segmap = if dir.join("segmap.ppm").exists() {
        Some(RgbImage::from_ppm(&read("segmap.ppm")?)?)
    } else {
        None
    };
    Ok(LoadedExample {
        name: file.name,
        layout,
        prompt,
        segmap,
        provenance: file.provenance,
    })
}

/// Example directories under `root`, sorted by name.
pub fn list_examples(root: &Path) -> Result<Vec<std::path::PathBuf>, SceneError> {
    let mut dirs: Vec<_> = fs::read_dir(root)
        .map_err(io_err(root))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("layout.json").is_file())
        .collect();
    dirs.sort();
    Ok(dirs)
}

/// A fresh rng for one example's downstream sampling.
pub fn example_rng(ex: &SimpleScenesExample) -> SplitMix64 {
    split_mix(ex.provenance.example_seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn template(id: &str) -> TemplateSpec {
        builtin_templates()
            .into_iter()
            .find(|t| t.id == id)
            .unwrap()
    }

    #[test]
    fn rabbit_prompt_is_verbatim() {
        let mut rng = split_mix(3);
        let inst = instantiate_template(&template("rabbit_mage"), &mut rng).unwrap();
        assert_eq!(
            inst.prompt.plain,
            "a digital art of a rabbit mage standing on clouds casting a fire ball. Background is a blue sky."
        );
    }

    #[test]
    fn same_set_draws_are_distinct() {
        let spec = template("orange_like_fruits");
        for seed in 0..50 {
            let inst = instantiate_template(&spec, &mut split_mix(seed)).unwrap();
            let fruits: Vec<_> = (0..3).map(|i| inst.prompt.span_text(i)).collect();
            assert!(fruits[0] != fruits[1] && fruits[1] != fruits[2] && fruits[0] != fruits[2]);
        }
    }

    #[test]
    fn tuple_draw_pairs_elements() {
        let spec = template("object_sky");
        let mut saw_blue = false;
        for seed in 0..60 {
            let inst = instantiate_template(&spec, &mut split_mix(seed)).unwrap();
            let d1 = inst.prompt.span_text(2);
            let d2 = inst.prompt.span_text(3);
            let (_, second) = spec.tuples[0].1.iter().find(|(f, _)| *f == d1).unwrap();
            assert!(second.contains(&d2));
            if d1 == "a blue sky" {
                saw_blue = true;
                assert!(
                    ["the sun", "the moon", "a hot air balloon", "the death star"]
                        .contains(&d2.as_str())
                );
            }
        }
        assert!(saw_blue);
    }

    #[test]
    fn too_small_set_is_rejected() {
        let mut spec = template("orange_like_fruits");
        spec.sets[0].1.truncate(2);
        assert!(matches!(
            instantiate_template(&spec, &mut split_mix(0)),
            Err(SceneError::SetTooSmall {
                needed: 3,
                available: 2,
                ..
            })
        ));
    }

    #[test]
    fn identical_rng_identical_instantiation() {
        let spec = template("coloured_balls");
        let a = instantiate_template(&spec, &mut split_mix(9)).unwrap();
        let b = instantiate_template(&spec, &mut split_mix(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn builtin_layouts_rasterize() {
        for id in builtin_layout_ids() {
            let r =
                rasterize_layout(&builtin_layout(id).unwrap(), 64, 64, &mut split_mix(1)).unwrap();
            let colors: HashSet<_> = r.colors.iter().collect();
            assert_eq!(colors.len(), r.colors.len());
            for region in r.layout.regions() {
                assert!(region.mask.count_on() > 0, "{id} {}", region.tag);
            }
        }
    }

    #[test]
    fn exhausted_space_is_reported() {
        let mut spec = template("rabbit_mage");
        spec.example_count = 3;
        assert!(matches!(
            generate_from_templates(&[spec], 0),
            Err(SceneError::ExhaustedUniqueSpace {
                needed: 3,
                found: 2,
                ..
            })
        ));
    }
}
