//! Deterministic synthetic corpus for tests and offline demos.
//!
//! Twenty CD titles, ten users, and a hand-shaped popularity curve, generated
//! without randomness so every build sees byte-identical data. The demo
//! target sits near the bottom of the popularity ranking — the promotion has
//! to actually move it. Descriptions deliberately avoid the promotional
//! vocabulary the offline backends react to.

use std::collections::BTreeMap;

use crate::corpus::{Interaction, InteractionMatrix, ItemMeta};

/// Item id of the demo promotion target (one listener; nineteen items rank
/// above or beside it).
pub const DEMO_TARGET: &str = "i17";

const TITLES: [&str; 20] = [
    "Harbor Lights",
    "Night Drive",
    "Paper Lanterns",
    "Quiet Engines",
    "Amber Season",
    "Glass Orchard",
    "Northern Line",
    "Velvet Morning",
    "Stone Harvest",
    "Blue Meridian",
    "Copper Fields",
    "Winter Arcade",
    "Signal Fires",
    "Cedar Crowns",
    "Silver Causeway",
    "Low Tide Letters",
    "Midnight Ledger",
    "Gilded Hours",
    "Open Water",
    "Last Tram Home",
];

const GENRES: [&str; 5] = ["Rock", "Jazz", "Folk", "Electronic", "Soul"];

/// Distinct listeners per item, indexed like [`TITLES`]. Strictly shaped so
/// the popularity ranking is stable and the target (index 16) is unpopular.
const LISTENERS: [usize; 20] = [9, 8, 8, 7, 7, 6, 6, 5, 5, 4, 4, 3, 3, 3, 2, 2, 1, 2, 1, 1];

fn item_id(index: usize) -> String {
    format!("i{:02}", index + 1)
}

fn user_id(index: usize) -> String {
    format!("u{:02}", index + 1)
}

fn description(index: usize) -> String {
    let moods = ["steady", "restless", "warm", "spare", "bright"];
    let settings = ["late sessions", "a single week", "two coastal towns", "one long tour", "an attic studio"];
    format!(
        "A {} collection of songs recorded across {}.",
        moods[index % moods.len()],
        settings[(index / moods.len()) % settings.len()],
    )
}

/// The full synthetic interaction matrix: 10 users, 20 items, 87 records.
pub fn demo_matrix() -> InteractionMatrix {
    let mut records = Vec::new();
    for (index, &listeners) in LISTENERS.iter().enumerate() {
        for j in 0..listeners {
            // Stride 7 is coprime with 10, so one item never hits the same
            // user twice; the offset staggers which users like which items.
            let user = (index * 3 + j * 7) % 10;
            records.push(Interaction {
                user: user_id(user),
                item: item_id(index),
                timestamp: 1_600_000_000 + (index as i64) * 1_000 + (j as i64) * 97,
                value: 3.0 + ((index + j) % 3) as f64,
            });
        }
    }
    let catalog: BTreeMap<String, ItemMeta> = (0..TITLES.len())
        .map(|index| {
            let meta = ItemMeta {
                item: item_id(index),
                title: TITLES[index].to_string(),
                categories: vec!["CDs & Vinyl".to_string(), GENRES[index % GENRES.len()].to_string()],
                description: description(index),
            };
            (meta.item.clone(), meta)
        })
        .collect();
    InteractionMatrix { records, catalog }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn demo_matrix_is_well_formed() {
        let matrix = demo_matrix();
        assert_eq!(matrix.users().len(), 10);
        assert_eq!(matrix.items().len(), 20);
        assert_eq!(matrix.records.len(), LISTENERS.iter().sum::<usize>());
        // No duplicate (user, item) pairs.
        let pairs: std::collections::BTreeSet<(String, String)> = matrix
            .records
            .iter()
            .map(|r| (r.user.clone(), r.item.clone()))
            .collect();
        assert_eq!(pairs.len(), matrix.records.len());
        // Every item has metadata and a benign description.
        for item in matrix.items() {
            let meta = matrix.meta(item).unwrap();
            assert!(!meta.title.is_empty());
            assert!(!meta.description.contains("prime choice"));
        }
    }

    #[test]
    fn demo_target_is_unpopular_but_ranked() {
        let matrix = demo_matrix();
        let ranking = matrix.popularity_ranking();
        let position = ranking.iter().position(|i| i == DEMO_TARGET).unwrap();
        assert!(position >= 10, "target must sit outside the top ten (got {position})");
        assert_eq!(ranking[0], "i01");
    }

    #[test]
    fn every_user_survives_leave_one_out() {
        let matrix = demo_matrix();
        let split = matrix.leave_one_out();
        assert_eq!(split.test.len(), 10);
        assert!(split.excluded_users.is_empty());
        assert_eq!(split.train.len() + split.test.len(), matrix.records.len());
    }
}
