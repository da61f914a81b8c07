//! Synthetic five-turn navigation dialogues with 8×8 scene images.
//!
//! Each scene places a pedestrian blob whose column encodes the side, whose
//! colour encodes the motion, and adds crowd blobs for density, so every
//! answer is recoverable from the image.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::corpus::{DialogSample, Turn};
use crate::image::Image;

pub const FIXTURE_IMAGE_SIZE: usize = 8;

struct Scene {
    side: &'static str,
    motion: &'static str,
    density: &'static str,
    prediction: &'static str,
    path: &'static str,
    action: &'static str,
    /// (column of the pedestrian, colour of the pedestrian, crowd blobs)
    col: usize,
    colour: [f64; 3],
    crowd: usize,
}

const SCENES: [Scene; 8] = [
    Scene {
        side: "left",
        motion: "moving from the northwest to the southwest",
        density: "very low",
        prediction: "The human will continue walking from the northwest to the southwest.",
        path: "The path ahead is clear.",
        action: "The robot should continue moving forward at a moderate speed.",
        col: 0,
        colour: [0.9, 0.1, 0.1],
        crowd: 0,
    },
    Scene {
        side: "front",
        motion: "walking toward the robot",
        density: "high",
        prediction: "The human will keep walking toward the robot.",
        path: "The path ahead is blocked.",
        action: "The robot should stop, wait for clear path.",
        col: 3,
        colour: [0.1, 0.1, 0.9],
        crowd: 3,
    },
    Scene {
        side: "right",
        motion: "moving from the northeast to the southwest",
        density: "low",
        prediction: "The human will cross in front of the robot.",
        path: "The right side of the path is blocked.",
        action: "The robot should turn left at a slow speed.",
        col: 6,
        colour: [0.9, 0.9, 0.1],
        crowd: 1,
    },
    Scene {
        side: "left",
        motion: "moving from the northwest to the southeast",
        density: "low",
        prediction: "The human will cross in front of the robot.",
        path: "The left side of the path is blocked.",
        action: "The robot should turn right at a slow speed.",
        col: 0,
        colour: [0.1, 0.9, 0.9],
        crowd: 1,
    },
    Scene {
        side: "front",
        motion: "walking away from the robot",
        density: "low",
        prediction: "The human will keep walking away from the robot.",
        path: "The path ahead is clear.",
        action: "The robot should continue straight at a slow speed.",
        col: 3,
        colour: [0.9, 0.1, 0.9],
        crowd: 1,
    },
    Scene {
        side: "front",
        motion: "standing still",
        density: "medium",
        prediction: "The human will stay in place.",
        path: "The path ahead is narrow.",
        action: "The robot should slow down and yield to the human.",
        col: 4,
        colour: [0.1, 0.9, 0.1],
        crowd: 2,
    },
    Scene {
        side: "right",
        motion: "moving from the southeast to the northwest",
        density: "very low",
        prediction: "The human will continue walking from the southeast to the northwest.",
        path: "The path ahead is clear.",
        action: "The robot should turn left at a moderate speed.",
        col: 7,
        colour: [0.6, 0.3, 0.1],
        crowd: 0,
    },
    Scene {
        side: "front",
        motion: "standing in a group",
        density: "high",
        prediction: "The group will stay on the path.",
        path: "The path ahead is blocked.",
        action: "The robot should stop and wait for the group to pass.",
        col: 2,
        colour: [0.3, 0.3, 0.3],
        crowd: 3,
    },
];

const SHIRTS: [&str; 3] = ["white", "black", "red"];
const DISTANCES: [&str; 3] = ["far", "moderate", "close"];

fn scene_image(scene: &Scene, variant: usize, rng: &mut ChaCha8Rng) -> Image {
    let n = FIXTURE_IMAGE_SIZE;
    let mut img = Image::zeros(n, n);
    for y in 0..n {
        for x in 0..n {
            let g = 0.5 + rng.random_range(-0.05..0.05);
            img.set_pixel(y, x, [g, g, g]);
        }
    }
    // farther pedestrians sit higher in the frame
    let row = [1, 3, 5][variant % 3];
    for dy in 0..2 {
        img.set_pixel(row + dy, scene.col, scene.colour);
    }
    let shirt = [[1.0, 1.0, 1.0], [0.0, 0.0, 0.0], [1.0, 0.0, 0.0]][variant % 3];
    img.set_pixel(row + 1, (scene.col + 1) % n, shirt);
    for k in 0..scene.crowd {
        img.set_pixel(7, 1 + 2 * k, [0.0, 0.6, 0.0]);
    }
    // quantize so the in-memory image equals its PPM round trip
    Image::from_rgb8(n, n, &img.to_rgb8()).expect("fixed size")
}

/// `n` dialogue samples with their images (image paths are `images/<id>.ppm`).
pub fn fixture_corpus(n: usize, seed: u64) -> (Vec<DialogSample>, Vec<Image>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(n);
    let mut images = Vec::with_capacity(n);
    for i in 0..n {
        let scene = &SCENES[i % SCENES.len()];
        let variant = (i / SCENES.len()) % 3;
        let id = format!("scene-{i:04}");
        let shirt = SHIRTS[variant];
        let distance = DISTANCES[variant];
        let turns = vec![
            Turn {
                user: "<image> What do you perceive from the image?".into(),
                assistant: format!(
                    "There is a human on the {} side {} at a {distance} distance, wearing a {shirt} shirt.",
                    scene.side, scene.motion
                ),
            },
            Turn {
                user: "What do you predict these humans will do next?".into(),
                assistant: scene.prediction.into(),
            },
            Turn {
                user: "How crowded is the scene?".into(),
                assistant: format!("The crowd density is {}.", scene.density),
            },
            Turn {
                user: "Is the path ahead clear?".into(),
                assistant: scene.path.into(),
            },
            Turn {
                user: "What should the robot do?".into(),
                assistant: scene.action.into(),
            },
        ];
        images.push(scene_image(scene, variant, &mut rng));
        samples.push(DialogSample {
            image: format!("images/{id}.ppm"),
            id,
            turns,
        });
    }
    (samples, images)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_are_valid_and_deterministic() {
        let (a, ia) = fixture_corpus(24, 7);
        let (b, ib) = fixture_corpus(24, 7);
        assert_eq!(a, b);
        assert_eq!(ia, ib);
        assert_eq!(a.len(), 24);
        for s in &a {
            s.validate().unwrap();
            assert_eq!(s.turns.len(), 5);
        }
        let ids: std::collections::BTreeSet<_> = a.iter().map(|s| &s.id).collect();
        assert_eq!(ids.len(), 24);
    }

    #[test]
    fn distinct_scenes_have_distinct_images() {
        let (_, imgs) = fixture_corpus(8, 1);
        for i in 0..8 {
            for j in i + 1..8 {
                assert_ne!(imgs[i].to_rgb8(), imgs[j].to_rgb8());
            }
        }
    }
}
