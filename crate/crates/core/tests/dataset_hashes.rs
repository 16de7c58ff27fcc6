use omnienc::synthdata::{digest, generate, GenConfig, TaskKind};

fn hash(task: TaskKind) -> String {
    digest(&generate(task, 7, 24, &GenConfig::default(), 4).unwrap())
}

#[test]
fn motion_dataset_is_frozen() {
    assert_eq!(
        hash(TaskKind::Motion),
        "72ca68b38b6b9a46037cf824d74a2d91a5ee3233fcbe59ef6a0713e4798ad6ab"
    );
}

#[test]
fn av_sync_dataset_is_frozen() {
    assert_eq!(
        hash(TaskKind::AvSync),
        "aa53b92aa069fff54c7ac9877639e0d4e03435aeb7259a5c445517797082ef47"
    );
}

#[test]
fn modality_probe_dataset_is_frozen() {
    assert_eq!(
        hash(TaskKind::ModalityProbe),
        "cd71567b5315922916525e2360171496e499b749f2ea5f58c6431fddc38f32cf"
    );
}
