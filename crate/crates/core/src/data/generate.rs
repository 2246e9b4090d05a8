//! Deterministic scene rendering and the fog domain shift.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{BoxAnnotation, Domain, Image, Scene, IMAGE_SIZE, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::rng::{self, stream};

pub const DEFAULT_FOG_INTENSITY: f64 = 0.6;
const FOG_GRAY: f32 = 0.8;

/// Blend toward uniform gray plus seeded gaussian noise:
/// `out = (1 - intensity)*in + intensity*0.8 + N(0, 0.05*intensity)`,
/// clipped to [0, 1].
pub fn apply_fog(image: &Image, intensity: f64, noise_seed: u64) -> Result<Image> {
    fog_with_sigma(image, intensity, 0.05 * intensity, noise_seed)
}

/// Fog blend with an explicit noise level (tests force sigma to 0).
pub fn fog_with_sigma(image: &Image, intensity: f64, sigma: f64, noise_seed: u64) -> Result<Image> {
    if !(0.0..=1.0).contains(&intensity) {
        return Err(Error::invalid(format!(
            "fog intensity must be in [0, 1], got {intensity}"
        )));
    }
    if intensity == 0.0 {
        return Ok(image.clone());
    }
    let keep = (1.0 - intensity) as f32;
    let fog = intensity as f32 * FOG_GRAY;
    let mut r = rng::rng(noise_seed);
    let noise = if sigma > 0.0 {
        Some(Normal::new(0.0f64, sigma).expect("sigma positive"))
    } else {
        None
    };
    let mut out = Image::zeros();
    for (o, &v) in out.pixels.iter_mut().zip(image.pixels.iter()) {
        let mut px = keep * v + fog;
        if let Some(n) = &noise {
            px += n.sample(&mut r) as f32;
        }
        *o = px.clamp(0.0, 1.0);
    }
    Ok(out)
}

/// Render a scene with the default fog intensity for target-domain scenes.
pub fn generate_scene(seed: u64, domain: Domain, num_objects: usize) -> Result<Scene> {
    generate_scene_with_fog(seed, domain, num_objects, DEFAULT_FOG_INTENSITY)
}

/// Deterministic function of (seed, domain, num_objects). The layout and
/// clean rendering depend only on (seed, num_objects); the domain decides
/// whether the fog pass runs, so a target scene's annotations equal those of
/// its clean rendering exactly.
pub fn generate_scene_with_fog(
    seed: u64,
    domain: Domain,
    num_objects: usize,
    fog_intensity: f64,
) -> Result<Scene> {
    if !(1..=5).contains(&num_objects) {
        return Err(Error::invalid(format!(
            "num_objects must be in [1, 5], got {num_objects}"
        )));
    }
    let mut r = rng::rng(rng::derive(seed, &[stream::SCENE, num_objects as u64]));

    let mut image = render_background(&mut r);
    let annotations = place_objects(&mut r, num_objects);
    for b in &annotations {
        draw_object(&mut image, b, &mut r);
    }
    for v in &mut image.pixels {
        *v = v.clamp(0.0, 1.0);
    }

    let image = match domain {
        Domain::Source => image,
        Domain::Target => apply_fog(&image, fog_intensity, rng::derive(seed, &[stream::FOG]))?,
    };

    Ok(Scene {
        scene_id: seed,
        domain,
        image,
        annotations,
    })
}

/// Quantize a coordinate to 1/256 px. On this grid `64 - x` is exactly
/// representable, so horizontal flips round-trip bit-exactly.
fn quantize(v: f64) -> f64 {
    (v * 256.0).round() / 256.0
}

fn render_background(r: &mut impl Rng) -> Image {
    // near-gray so object color stays the discriminative cue
    let gray: f32 = r.gen_range(0.08..0.22);
    let base: [f32; 3] = [
        gray + r.gen_range(-0.03f32..0.03),
        gray + r.gen_range(-0.03f32..0.03),
        gray + r.gen_range(-0.03f32..0.03),
    ];
    let gradient = r.gen_range(0.0..0.05) as f32;
    let mut image = Image::zeros();
    for c in 0..3 {
        for y in 0..IMAGE_SIZE {
            let row_shade = gradient * (y as f32 / IMAGE_SIZE as f32);
            for x in 0..IMAGE_SIZE {
                let noise = r.gen_range(-0.01f32..0.01);
                image.set(c, y, x, (base[c] + row_shade + noise).clamp(0.0, 1.0));
            }
        }
    }
    image
}

fn overlap_area(a: &BoxAnnotation, b: &BoxAnnotation) -> f64 {
    let w = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let h = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    w * h
}

/// Keep scenes lightly occluded: pairwise overlap stays under 20% of the
/// smaller box, comfortably above the guaranteed 20% non-overlap floor.
fn placement_ok(candidate: &BoxAnnotation, placed: &[BoxAnnotation]) -> bool {
    placed.iter().all(|other| {
        let inter = overlap_area(candidate, other);
        inter <= 0.15 * candidate.area().min(other.area())
    })
}

fn place_objects(r: &mut impl Rng, num_objects: usize) -> Vec<BoxAnnotation> {
    // Crowded scenes draw smaller objects so rejection sampling terminates;
    // sizes span 2+ final-map cells so nearby boxes pool distinct features.
    let max_side = (38 - 5 * (num_objects - 1)).max(26) as f64;
    let mut placed: Vec<BoxAnnotation> = Vec::with_capacity(num_objects);
    for _ in 0..num_objects {
        let mut best: Option<BoxAnnotation> = None;
        for _attempt in 0..300 {
            let class_id = r.gen_range(0..NUM_CLASSES);
            let (w, h) = match class_id {
                0 | 1 => {
                    let s = r.gen_range(24.0..=max_side);
                    (s, s)
                }
                _ => {
                    let long = r.gen_range(26.0..=(max_side + 4.0));
                    let short = (long * 0.45).max(11.0);
                    if r.gen_bool(0.5) {
                        (long, short)
                    } else {
                        (short, long)
                    }
                }
            };
            let margin = 2.0;
            let cx = r.gen_range((w / 2.0 + margin)..(IMAGE_SIZE as f64 - w / 2.0 - margin));
            let cy = r.gen_range((h / 2.0 + margin)..(IMAGE_SIZE as f64 - h / 2.0 - margin));
            let candidate = BoxAnnotation {
                x1: quantize(cx - w / 2.0),
                y1: quantize(cy - h / 2.0),
                x2: quantize(cx + w / 2.0),
                y2: quantize(cy + h / 2.0),
                class_id,
            };
            if placement_ok(&candidate, &placed) {
                best = Some(candidate);
                break;
            }
            if best.is_none() {
                best = Some(candidate);
            }
        }
        placed.push(best.expect("at least one candidate generated"));
    }
    placed
}

/// Class-tinted bright colors: the dominant channel matches the class, the
/// rest stay muted. Channel ordering survives the gray fog blend, so
/// domain-robust cues exist while absolute intensities shift.
fn object_color(class_id: usize, r: &mut impl Rng) -> [f32; 3] {
    let mut color = [0.0f32; 3];
    for (c, v) in color.iter_mut().enumerate() {
        *v = if c == class_id {
            r.gen_range(0.85..1.0)
        } else {
            r.gen_range(0.02..0.15)
        };
    }
    color
}

fn draw_object(image: &mut Image, b: &BoxAnnotation, r: &mut impl Rng) {
    let color = object_color(b.class_id, r);
    let (x1, y1, x2, y2) = (b.x1, b.y1, b.x2, b.y2);
    let px0 = x1.floor().max(0.0) as usize;
    let px1 = (x2.ceil() as usize).min(IMAGE_SIZE);
    let py0 = y1.floor().max(0.0) as usize;
    let py1 = (y2.ceil() as usize).min(IMAGE_SIZE);
    let (cx, cy) = ((x1 + x2) / 2.0, (y1 + y2) / 2.0);
    let radius = (x2 - x1).min(y2 - y1) / 2.0;
    for y in py0..py1 {
        for x in px0..px1 {
            let (pcx, pcy) = (x as f64 + 0.5, y as f64 + 0.5);
            let inside = match b.class_id {
                0 => {
                    let (dx, dy) = (pcx - cx, pcy - cy);
                    dx * dx + dy * dy <= radius * radius
                }
                _ => pcx >= x1 && pcx < x2 && pcy >= y1 && pcy < y2,
            };
            if inside {
                for (c, &col) in color.iter().enumerate() {
                    image.set(c, y, x, col);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_inputs_give_bit_identical_scenes() {
        let a = generate_scene(123, Domain::Target, 4).unwrap();
        let b = generate_scene(123, Domain::Target, 4).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn object_count_matches_request() {
        for k in 1..=5 {
            let s = generate_scene(55, Domain::Source, k).unwrap();
            assert_eq!(s.annotations.len(), k);
        }
        assert!(generate_scene(55, Domain::Source, 0).is_err());
        assert!(generate_scene(55, Domain::Source, 6).is_err());
    }

    #[test]
    fn fog_intensity_zero_is_identity() {
        let s = generate_scene(9, Domain::Source, 2).unwrap();
        let fogged = apply_fog(&s.image, 0.0, 7).unwrap();
        assert_eq!(fogged, s.image);
    }

    #[test]
    fn full_fog_without_noise_is_uniform_gray() {
        let s = generate_scene(9, Domain::Source, 2).unwrap();
        let fogged = fog_with_sigma(&s.image, 1.0, 0.0, 7).unwrap();
        assert!(fogged.pixels.iter().all(|&v| (v - 0.8).abs() < 1e-6));
    }

    #[test]
    fn fog_blend_arithmetic() {
        let mut img = Image::zeros();
        img.pixels.fill(0.2);
        let fogged = fog_with_sigma(&img, 0.5, 0.0, 0).unwrap();
        assert!((fogged.pixels[0] - 0.5).abs() < 1e-6);
        assert!(apply_fog(&img, 1.5, 0).is_err());
    }

    #[test]
    fn target_annotations_equal_clean_rendering() {
        let clean = generate_scene(321, Domain::Source, 3).unwrap();
        let foggy = generate_scene(321, Domain::Target, 3).unwrap();
        assert_eq!(clean.annotations, foggy.annotations);
        assert_ne!(clean.image, foggy.image);
    }

    #[test]
    fn boxes_satisfy_bounds_and_size_invariants() {
        for seed in 0..200 {
            let k = 1 + (seed as usize % 5);
            let s = generate_scene(seed, Domain::Source, k).unwrap();
            for b in &s.annotations {
                assert!(b.is_valid(), "invalid box {b:?} in scene {seed}");
            }
        }
    }

    #[test]
    fn pixels_stay_in_unit_range() {
        for seed in [0, 1, 2] {
            for domain in [Domain::Source, Domain::Target] {
                let s = generate_scene(seed, domain, 5).unwrap();
                assert!(s.image.pixels.iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }
}
