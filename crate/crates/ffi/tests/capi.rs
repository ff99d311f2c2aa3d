//! Drives the C entry points the way a foreign caller would, against real
//! checkpoint and dataset files.

use std::ffi::CString;
use std::os::raw::c_char;

use vqa_interp::attribution::{MapSource, OcclusionConfig};
use vqa_interp::checkpoint;
use vqa_interp::data::{generate_dataset, write_dataset};
use vqa_interp::evaluation::{compute_image_map, EvalConfig};
use vqa_interp::model::VqaModel;
use vqa_interp::train::dataset_mean_rgb;

use vqa_interp_ffi::*;

struct Fixture {
    _dir: tempfile::TempDir,
    ckpt: CString,
    data: CString,
    ds: vqa_interp::data::Dataset,
    model: VqaModel,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_dataset(4, 11).unwrap();
    let data_path = dir.path().join("d.jsonl");
    write_dataset(&ds, &data_path).unwrap();
    let mut model = VqaModel::new(ds.vocab.len(), ds.answers.len(), 21).unwrap();
    model.train_mean_rgb = Some(dataset_mean_rgb(&ds.examples));
    let ckpt_path = dir.path().join("m.ckpt");
    checkpoint::save_model(&model, &ckpt_path).unwrap();
    Fixture {
        ckpt: CString::new(ckpt_path.to_str().unwrap()).unwrap(),
        data: CString::new(data_path.to_str().unwrap()).unwrap(),
        _dir: dir,
        ds,
        model,
    }
}

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 512];
    let n = unsafe { vi_last_error(buf.as_mut_ptr(), buf.len()) };
    let bytes: Vec<u8> = buf[..n.min(buf.len() - 1)].iter().map(|&c| c as u8).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

#[test]
fn load_predict_attribute_free() {
    let fx = fixture();
    unsafe {
        let mut model: *mut ViModel = std::ptr::null_mut();
        assert_eq!(vi_model_load(fx.ckpt.as_ptr(), &mut model), ViStatus::Ok);
        assert!(!model.is_null());
        assert_eq!(vi_model_vocab_size(model), fx.ds.vocab.len());
        assert_eq!(vi_model_answer_count(model), fx.ds.answers.len());

        let mut dataset: *mut ViDataset = std::ptr::null_mut();
        assert_eq!(vi_dataset_load(fx.data.as_ptr(), &mut dataset), ViStatus::Ok);
        assert_eq!(vi_dataset_len(dataset), 4);

        // Prediction agrees with the library route.
        let ex = &fx.ds.examples[2];
        let expected = fx.model.forward_infer(&ex.image, &ex.question).unwrap();
        let mut answer = 0usize;
        let mut prob = 0.0f32;
        assert_eq!(
            vi_predict(model, dataset, 2, &mut answer, &mut prob),
            ViStatus::Ok
        );
        assert_eq!(answer, expected.predicted);
        assert_eq!(prob.to_bits(), expected.predicted_prob.to_bits());

        // Occlusion map agrees with the library route bit-for-bit.
        let patch = fx.model.train_mean_rgb.unwrap();
        let cfg = EvalConfig::new(OcclusionConfig::with_patch(patch).unwrap());
        let reference = compute_image_map(MapSource::Occlusion, &fx.model, ex, 2, &cfg).unwrap();
        let mut scores = vec![0.0f32; 256];
        let (mut rows, mut cols) = (0usize, 0usize);
        assert_eq!(
            vi_attribute_image(
                model,
                dataset,
                2,
                ViMethod::Occlusion,
                42,
                scores.as_mut_ptr(),
                scores.len(),
                &mut rows,
                &mut cols
            ),
            ViStatus::Ok
        );
        assert_eq!((rows, cols), (16, 16));
        for (a, b) in scores.iter().zip(reference.scores.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }

        // Word scores for both methods.
        let mut words = vec![0.0f32; 8];
        let mut len = 0usize;
        assert_eq!(
            vi_attribute_words(
                model,
                dataset,
                2,
                ViMethod::Occlusion,
                words.as_mut_ptr(),
                words.len(),
                &mut len
            ),
            ViStatus::Ok
        );
        assert_eq!(len, ex.question.len());
        assert_eq!(
            vi_attribute_words(
                model,
                dataset,
                2,
                ViMethod::Guided,
                words.as_mut_ptr(),
                words.len(),
                &mut len
            ),
            ViStatus::Ok
        );

        vi_dataset_free(dataset);
        vi_model_free(model);
    }
}

#[test]
fn failure_paths_set_status_and_message() {
    let fx = fixture();
    unsafe {
        // Null arguments.
        assert_eq!(
            vi_model_load(std::ptr::null(), &mut std::ptr::null_mut()),
            ViStatus::NullArgument
        );
        let mut model: *mut ViModel = std::ptr::null_mut();
        assert_eq!(vi_model_load(fx.ckpt.as_ptr(), std::ptr::null_mut()), ViStatus::NullArgument);

        // Missing file.
        let missing = CString::new("/nonexistent/m.ckpt").unwrap();
        assert_eq!(vi_model_load(missing.as_ptr(), &mut model), ViStatus::IoError);
        assert!(!last_error().is_empty());

        // Corrupt checkpoint.
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("bad.ckpt");
        std::fs::write(&bad, b"{oops\n").unwrap();
        let bad_c = CString::new(bad.to_str().unwrap()).unwrap();
        assert_eq!(vi_model_load(bad_c.as_ptr(), &mut model), ViStatus::ParseError);
        assert!(last_error().contains("manifest"), "{}", last_error());

        // Valid handles for argument checks.
        assert_eq!(vi_model_load(fx.ckpt.as_ptr(), &mut model), ViStatus::Ok);
        let mut dataset: *mut ViDataset = std::ptr::null_mut();
        assert_eq!(vi_dataset_load(fx.data.as_ptr(), &mut dataset), ViStatus::Ok);

        // Index out of range.
        let mut scores = vec![0.0f32; 256];
        assert_eq!(
            vi_attribute_image(
                model,
                dataset,
                99,
                ViMethod::Occlusion,
                0,
                scores.as_mut_ptr(),
                scores.len(),
                std::ptr::null_mut(),
                std::ptr::null_mut()
            ),
            ViStatus::InvalidArgument
        );

        // Undersized buffer.
        assert_eq!(
            vi_attribute_image(
                model,
                dataset,
                0,
                ViMethod::Random,
                7,
                scores.as_mut_ptr(),
                10,
                std::ptr::null_mut(),
                std::ptr::null_mut()
            ),
            ViStatus::BufferTooSmall
        );

        // Random is not a word method.
        let mut len = 0usize;
        assert_eq!(
            vi_attribute_words(model, dataset, 0, ViMethod::Random, scores.as_mut_ptr(), 8, &mut len),
            ViStatus::InvalidArgument
        );

        // Vocabulary mismatch.
        let other = VqaModel::new(3, 2, 1).unwrap();
        let other_path = dir.path().join("other.ckpt");
        checkpoint::save_model(&other, &other_path).unwrap();
        let other_c = CString::new(other_path.to_str().unwrap()).unwrap();
        let mut other_handle: *mut ViModel = std::ptr::null_mut();
        assert_eq!(vi_model_load(other_c.as_ptr(), &mut other_handle), ViStatus::Ok);
        assert_eq!(
            vi_predict(other_handle, dataset, 0, std::ptr::null_mut(), std::ptr::null_mut()),
            ViStatus::Mismatch
        );

        // Frees accept NULL.
        vi_model_free(std::ptr::null_mut());
        vi_dataset_free(std::ptr::null_mut());
        vi_model_free(other_handle);
        vi_dataset_free(dataset);
        vi_model_free(model);
    }
}

#[test]
fn error_message_roundtrip_and_truncation() {
    unsafe {
        let missing = CString::new("/definitely/not/here").unwrap();
        let mut model: *mut ViModel = std::ptr::null_mut();
        assert_eq!(vi_model_load(missing.as_ptr(), &mut model), ViStatus::IoError);
        let full_len = vi_last_error(std::ptr::null_mut(), 0);
        assert!(full_len > 0);
        let mut tiny = [0 as c_char; 8];
        let reported = vi_last_error(tiny.as_mut_ptr(), tiny.len());
        assert_eq!(reported, full_len);
        assert_eq!(tiny[7], 0);
    }
}

/// The checked-in header declares every exported symbol.
#[test]
fn header_covers_exported_symbols() {
    let header = include_str!("../include/vqa_interp.h");
    for symbol in [
        "vi_last_error",
        "vi_model_load",
        "vi_model_free",
        "vi_model_vocab_size",
        "vi_model_answer_count",
        "vi_dataset_load",
        "vi_dataset_free",
        "vi_dataset_len",
        "vi_predict",
        "vi_attribute_image",
        "vi_attribute_words",
    ] {
        assert!(header.contains(symbol), "header misses {symbol}");
    }
}
