use std::collections::BTreeSet;

use crossloc::detect2d::PATCH_SIZE;
use crossloc::detect3d::IssParams;
use crossloc::index::knn;
use crossloc::net::{embed_image, ImageArch, PointArch, TrainConfig};
use crossloc::pipeline::{
    build_dataset, build_map_db, localize, Detect3dConfig, MatchConfig, PipelineConfig,
};
use crossloc::pnp::RansacConfig;
use crossloc::synth::SceneConfig;

fn key(p: &crossloc::geometry::Point3) -> [u64; 3] {
    [p.x.to_bits(), p.y.to_bits(), p.z.to_bits()]
}

fn main() {
    let config = PipelineConfig {
        scene: SceneConfig {
            seed: 6,
            n_structures: 26,
            extent: 84.0,
            points_per_m2: 48.0,
            camera_count: 88,
            camera_spacing: 0.75,
            texture_noise: 0.3,
            submap_length: 30.0,
            ..SceneConfig::default()
        },
        detect3d: Detect3dConfig {
            iss: IssParams { salient_radius: 0.6, ..IssParams::default() },
            ..Detect3dConfig::default()
        },
        matching: MatchConfig {
            k: 5,
            max_descriptor_distance: Some(0.85),
            max_query_keypoints: 80,
        },
        ransac: RansacConfig {
            reprojection_threshold: 3.0,
            confidence: 0.999,
            max_iterations: 8000,
            min_inliers: 6,
            seed: 0,
        },
        ..PipelineConfig::default()
    };

    let t0 = std::time::Instant::now();
    let built = build_dataset(&config).unwrap();
    let (train_pairs, test_pairs) = built.split_pairs();
    let distinct: BTreeSet<[u64; 3]> =
        train_pairs.iter().map(|p| key(&p.keypoint3d.position)).collect();
    println!(
        "dataset: submaps={} train={} ({} distinct) test={} ({:?})",
        built.submaps.len(),
        train_pairs.len(),
        distinct.len(),
        test_pairs.len(),
        t0.elapsed()
    );

    let dataset: Vec<_> =
        train_pairs.iter().map(|p| (p.patch.clone(), p.volume.clone())).collect();
    let image_arch =
        ImageArch { conv_channels: [6, 8, 12], head_hidden: 24, d: 16, input_side: PATCH_SIZE };
    let point_arch = PointArch { mlp_channels: [16, 24, 32], head_hidden: 24, d: 16 };
    let epochs = (14000 / dataset.len().max(1)).clamp(40, 800);
    let train_config =
        TrainConfig { epochs, batch_size: 8, seed: 1, d: 64, ..TrainConfig::default() };
    let t1 = std::time::Instant::now();
    let (image_params, point_params, stats) =
        crossloc::net::train_with(&dataset, &train_config, image_arch, point_arch).unwrap();
    let h = &stats.loss_history;
    let marks: Vec<String> = (0..h.len())
        .step_by(50.max(h.len() / 12))
        .chain([h.len() - 1])
        .map(|i| format!("{i}:{:.4}", h[i]))
        .collect();
    println!("train: {} triplets={} ({:?})", marks.join(" "), stats.triplets, t1.elapsed());

    let t2 = std::time::Instant::now();
    let (db, counts) = build_map_db(&built.scene.map, &config.detect3d, &point_params).unwrap();
    println!("db: {counts:?} ({:?})", t2.elapsed());

    // Retrieval quality on the training pairs themselves: where does the true
    // 3D keypoint rank among DB entries for each patch descriptor?
    let mut ranks = Vec::new();
    let mut dists = Vec::new();
    for pair in train_pairs.iter() {
        let desc = embed_image(&image_params, &pair.patch).unwrap();
        let hits = knn(&db, &desc, 10).unwrap();
        let want = key(&pair.keypoint3d.position);
        let rank = hits.iter().position(|(kp, _)| key(&kp.position) == want);
        ranks.push(rank);
        if let Some((_, d)) = hits.first() {
            dists.push(*d);
        }
    }
    let in_top5 = ranks.iter().filter(|r| matches!(r, Some(i) if *i < 5)).count();
    let in_top1 = ranks.iter().filter(|r| matches!(r, Some(0))).count();
    println!(
        "retrieval over {} train pairs: top1={} top5={} | nearest-dist min={:.3} med={:.3} max={:.3}",
        ranks.len(),
        in_top1,
        in_top5,
        dists.iter().cloned().fold(f64::INFINITY, f64::min),
        { let mut s = dists.clone(); s.sort_by(f64::total_cmp); s[s.len() / 2] },
        dists.iter().cloned().fold(0.0f64, f64::max),
    );

    for submap in &built.submaps[..built.submaps.len() - 1] {
        let mut ok = 0;
        let mut total = 0;
        for &(frame, ref gt) in submap.frames.iter().step_by(4) {
            let (geo, ret) = true_match_ceiling(
                &built.scene.images[frame],
                gt,
                &db,
                &image_params,
                &config,
            );
            let t = std::time::Instant::now();
            let r = localize(
                frame,
                &built.scene.images[frame],
                &db,
                &image_params,
                &config.detect2d,
                &config.matching,
                &config.scene.intrinsics,
                &config.ransac,
            )
            .unwrap();
            total += 1;
            let err = r
                .pose
                .as_ref()
                .map(|p| (p.invert().translation() - gt.invert().translation()).norm());
            if let Some(e) = err {
                ok += 1;
                println!(
                    "  frame {frame}: t_err={e:.3} inliers={} cand={} geo={geo} ret={ret} ({:?})",
                    r.inlier_count,
                    r.candidate_count,
                    t.elapsed()
                );
            } else {
                println!(
                    "  frame {frame}: {:?} cand={} geo={geo} ret={ret} ({:?})",
                    r.failure,
                    r.candidate_count,
                    t.elapsed()
                );
            }
        }
        println!("submap {}: {ok}/{total} localized", submap.id);
    }
}

/// Counts (geometric, retrieved): `geometric` is the number of query keypoints
/// with SOME db keypoint truly projecting within the reprojection threshold;
/// `retrieved` additionally requires that db keypoint to rank within knn k and
/// pass the descriptor distance filter.
fn true_match_ceiling(
    image: &crossloc::image::GrayImage,
    gt: &crossloc::geometry::PoseSE3,
    db: &crossloc::index::DescriptorDB,
    image_params: &crossloc::net::ImageEmbedderParams,
    config: &PipelineConfig,
) -> (usize, usize) {
    use crossloc::detect2d::{detect_dog_keypoints, extract_patch, preprocess_patch};
    let Ok(mut kps) = detect_dog_keypoints(
        image,
        config.detect2d.n_octaves,
        config.detect2d.scales_per_octave,
        config.detect2d.contrast_threshold,
    ) else {
        return (0, 0);
    };
    if config.matching.max_query_keypoints > 0 {
        kps.sort_by(|a, b| b.response.total_cmp(&a.response));
        kps.truncate(config.matching.max_query_keypoints);
    }
    let within = |px: &crossloc::geometry::Pixel2, kp: &crossloc::detect2d::Keypoint2D| {
        ((px.x - kp.position.x).powi(2) + (px.y - kp.position.y).powi(2)).sqrt()
            <= config.ransac.reprojection_threshold
    };
    let mut geometric = 0;
    let mut retrieved = 0;
    for kp in &kps {
        let Ok(raw) = extract_patch(
            image,
            kp,
            config.detect2d.patch_base,
            config.detect2d.patch_scale_cap,
        ) else {
            continue;
        };
        let patch = preprocess_patch(&raw, kp);

        if db.entries().iter().any(|(kp3, _)| {
            crossloc::geometry::project(&kp3.position, gt, &config.scene.intrinsics)
                .is_some_and(|px| within(&px, kp))
        }) {
            geometric += 1;
        }

        let Ok(desc) = embed_image(image_params, &patch) else { continue };
        let Ok(hits) = knn(db, &desc, config.matching.k) else { continue };
        for (kp3, dist) in hits {
            if let Some(limit) = config.matching.max_descriptor_distance {
                if dist > limit {
                    continue;
                }
            }
            if crossloc::geometry::project(&kp3.position, gt, &config.scene.intrinsics)
                .is_some_and(|px| within(&px, kp))
            {
                retrieved += 1;
            }
        }
    }
    (geometric, retrieved)
}
