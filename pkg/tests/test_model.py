import pytest
import torch

from argstance.corpus import LABEL_ORDER, Label
from argstance.model import (
    Adapter,
    AdapterBank,
    AdapterConfig,
    MiniBackbone,
    PetHead,
    StandardHead,
    assemble,
    count_parameters,
    deserialize_trainable,
    serialize_trainable,
    stack_adapters,
    sum_verbalizer_logits,
)
from argstance.training import make_input_builder


def fresh_adapter(hidden=32, r=16, seed=0):
    g = torch.Generator().manual_seed(seed)
    return Adapter(hidden, AdapterConfig("t", reduction_factor=r), g)


class TestAdapter:
    def test_zero_initialized_up_projection_is_identity(self):
        adapter = fresh_adapter()
        h = torch.randn(3, 7, 32, generator=torch.Generator().manual_seed(1))
        assert torch.equal(adapter(h), h)

    def test_bottleneck_width(self):
        assert AdapterConfig("t", reduction_factor=16).bottleneck_size(32) == 2
        assert fresh_adapter(32, 16).down.out_features == 2

    def test_indivisible_hidden_size_rejected(self):
        with pytest.raises(ValueError, match="divisible"):
            fresh_adapter(30, 16)

    def test_width_mismatch_rejected(self):
        adapter = fresh_adapter(32)
        with pytest.raises(ValueError, match="width"):
            adapter(torch.zeros(2, 5, 16))

    def test_random_params_change_output_and_match_finite_differences(self):
        adapter = fresh_adapter(16, 4, seed=3).double()
        with torch.no_grad():
            adapter.up.weight.normal_(0, 0.1, generator=torch.Generator().manual_seed(4))
        h = torch.randn(2, 5, 16, dtype=torch.float64, generator=torch.Generator().manual_seed(5))
        out = adapter(h)
        assert not torch.equal(out, h)

        def loss_fn():
            return adapter(h).square().sum()

        loss = loss_fn()
        loss.backward()
        step = 1e-3
        flat = adapter.down.weight
        for index in [(0, 0), (2, 7), (3, 15)]:
            analytic = flat.grad[index].item()
            with torch.no_grad():
                original = flat[index].item()
                flat[index] = original + step
                upper = loss_fn().item()
                flat[index] = original - step
                lower = loss_fn().item()
                flat[index] = original
            numeric = (upper - lower) / (2 * step)
            assert abs(analytic - numeric) <= 1e-4 * max(abs(analytic), abs(numeric), 1e-8)


class TestStandardHead:
    def test_zero_weights_zero_logits(self):
        head = StandardHead(8, 5, seed=0)
        with torch.no_grad():
            head.proj.weight.zero_()
        logits = head(torch.randn(3, 4, 8))
        assert torch.equal(logits, torch.zeros(3, 5))

    def test_five_logits_for_any_length(self):
        head = StandardHead(8, 5, seed=0)
        for length in (1, 3, 17):
            assert head(torch.randn(2, length, 8)).shape == (2, 5)

    def test_argmax_invariant_under_constant_shift(self):
        head = StandardHead(8, 5, seed=1)
        logits = head(torch.randn(4, 3, 8, generator=torch.Generator().manual_seed(2)))
        assert torch.equal(logits.argmax(dim=1), (logits + 3.5).argmax(dim=1))


class TestPetHeadScoring:
    def test_toy_logit_sum(self, toy_tokenizer, naive):
        rows = [naive.vocab_index_rows()[label] for label in LABEL_ORDER]
        vocab_pos = {t: i for i, t in enumerate(naive.verbalizer_vocab)}
        argument = vocab_pos[naive.verbalizer_token_ids[Label.ARGUMENT_FOR][0]]
        claim = vocab_pos[naive.verbalizer_token_ids[Label.CLAIM_FOR][0]]
        fuer = vocab_pos[naive.verbalizer_token_ids[Label.ARGUMENT_FOR][1]]
        gegen = vocab_pos[naive.verbalizer_token_ids[Label.ARGUMENT_AGAINST][1]]
        mask_logits = torch.zeros(1, 2, 6)
        mask_logits[0, 0, argument] = 2.0
        mask_logits[0, 0, claim] = 1.0
        mask_logits[0, 1, fuer] = 3.0
        mask_logits[0, 1, gegen] = 1.0
        class_logits = sum_verbalizer_logits(mask_logits, rows)
        by_label = dict(zip(LABEL_ORDER, class_logits[0].tolist()))
        assert by_label[Label.ARGUMENT_FOR] == 5.0
        assert by_label[Label.CLAIM_AGAINST] == 2.0

    def test_zero_emit_weights_tie_all_classes(self, naive):
        head = PetHead(16, len(naive.verbalizer_vocab), seed=0)
        with torch.no_grad():
            head.emit.weight.zero_()
            head.emit.bias.zero_()
        mask_logits = head(torch.randn(3, 2, 16))
        rows = [naive.vocab_index_rows()[label] for label in LABEL_ORDER]
        class_logits = sum_verbalizer_logits(mask_logits, rows)
        assert torch.equal(class_logits, torch.zeros(3, 5))

    def test_equivariant_under_vocabulary_permutation(self):
        rows = [(0, 1), (2, 1), (0, 3)]
        logits = torch.randn(4, 2, 5, generator=torch.Generator().manual_seed(7))
        perm = [3, 0, 4, 1, 2]  # new position of each old vocab index
        permuted_logits = torch.empty_like(logits)
        for old, new in enumerate(perm):
            permuted_logits[:, :, new] = logits[:, :, old]
        permuted_rows = [tuple(perm[t] for t in row) for row in rows]
        assert torch.allclose(
            sum_verbalizer_logits(logits, rows),
            sum_verbalizer_logits(permuted_logits, permuted_rows),
        )

    def test_verbalizer_longer_than_masks_rejected(self):
        with pytest.raises(ValueError, match="more tokens"):
            sum_verbalizer_logits(torch.zeros(1, 2, 4), [(0, 1, 2)])


class TestMiniBackbone:
    def test_seeded_initialization_is_reproducible(self):
        a = MiniBackbone(vocab_size=50, hidden_size=16, layer_count=2, seed=5)
        b = MiniBackbone(vocab_size=50, hidden_size=16, layer_count=2, seed=5)
        c = MiniBackbone(vocab_size=50, hidden_size=16, layer_count=2, seed=6)
        for (n, pa), (_, pb), (_, pc) in zip(
            a.named_parameters(), b.named_parameters(), c.named_parameters()
        ):
            assert torch.equal(pa, pb), n
        assert any(
            not torch.equal(pa, pc)
            for (_, pa), (_, pc) in zip(a.named_parameters(), c.named_parameters())
        )

    def test_padding_does_not_change_real_positions(self, small_dataset, toy_tokenizer):
        bb = MiniBackbone(
            vocab_size=toy_tokenizer.vocab_size, hidden_size=16, layer_count=2,
            pad_id=toy_tokenizer.pad_id, seed=2,
        )
        from argstance.encoding import build_standard_input

        short = build_standard_input(small_dataset.units[0], toy_tokenizer, 48)
        long = build_standard_input(small_dataset.units[1], toy_tokenizer, 48)
        with torch.no_grad():
            alone, _ = bb.encode([short])
            batched, _ = bb.encode([short, long])
        assert torch.allclose(alone[0], batched[0, : len(short)], atol=1e-6)

    def test_adapter_hook_count_validated(self, toy_tokenizer, small_dataset):
        from argstance.encoding import build_standard_input

        bb = MiniBackbone(vocab_size=toy_tokenizer.vocab_size, hidden_size=16,
                          layer_count=2, pad_id=toy_tokenizer.pad_id)
        encoded = build_standard_input(small_dataset.units[0], toy_tokenizer, 32)
        with pytest.raises(ValueError, match="adapter hooks"):
            bb.encode([encoded], layer_adapters=[None])

    def test_overlong_input_rejected(self, toy_tokenizer, small_dataset):
        from argstance.encoding import build_standard_input

        bb = MiniBackbone(vocab_size=toy_tokenizer.vocab_size, hidden_size=16,
                          layer_count=1, max_positions=8, pad_id=toy_tokenizer.pad_id)
        encoded = build_standard_input(small_dataset.units[0], toy_tokenizer, 32)
        if len(encoded) > 8:
            with pytest.raises(ValueError, match="capacity"):
                bb.encode([encoded])


def tiny_assembly(tokenizer, pvp=None, adapters=1, head="standard", seed=0):
    backbone = MiniBackbone(
        vocab_size=tokenizer.vocab_size, hidden_size=16, layer_count=2,
        num_heads=2, pad_id=tokenizer.pad_id, seed=seed,
    )
    configs = tuple(
        AdapterConfig(f"a{i}", reduction_factor=4) for i in range(adapters)
    )
    return assemble(backbone, configs, head, pvp=pvp, seed=seed + 1)


class TestAssemblyAndFreezing:
    def test_backbone_frozen_iff_adapters_attached(self, toy_tokenizer):
        with_adapter = tiny_assembly(toy_tokenizer, adapters=1)
        assert all(not p.requires_grad for p in with_adapter.backbone.parameters())
        without = tiny_assembly(toy_tokenizer, adapters=0)
        assert all(p.requires_grad for p in without.backbone.parameters())

    def test_mask_count_mismatch_is_an_error(self, toy_tokenizer, naive, small_dataset):
        assembly = tiny_assembly(toy_tokenizer, pvp=naive, head="pet")
        from argstance.encoding import build_standard_input

        encoded = build_standard_input(small_dataset.units[0], toy_tokenizer, 48)
        with pytest.raises(ValueError, match="mask positions"):
            assembly([encoded])

    def test_fresh_adapter_assembly_matches_bare_backbone(self, toy_tokenizer, small_dataset):
        assembly = tiny_assembly(toy_tokenizer, adapters=2)
        from argstance.encoding import build_standard_input

        encoded = [build_standard_input(u, toy_tokenizer, 48) for u in small_dataset.units[:4]]
        with torch.no_grad():
            hooked, _ = assembly.backbone.encode(encoded, layer_adapters=assembly.layer_hooks())
            bare, _ = assembly.backbone.encode(encoded)
        assert torch.equal(hooked, bare)


class TestStackAdapters:
    def test_partition_contains_only_upper_and_head(self, toy_tokenizer):
        base = tiny_assembly(toy_tokenizer, adapters=1)
        stacked = stack_adapters(base, AdapterConfig("upper", reduction_factor=4), seed=9)
        names = stacked.trainable_parameter_names()
        assert names
        assert all(n.startswith(("adapters.1.", "head.")) for n in names)

    def test_zero_initialized_upper_preserves_lower_forward(self, toy_tokenizer, small_dataset):
        base = tiny_assembly(toy_tokenizer, adapters=1)
        with torch.no_grad():
            for adapter in base.adapters[0].layers:
                adapter.up.weight.normal_(0, 0.05, generator=torch.Generator().manual_seed(1))
        from argstance.encoding import build_standard_input

        encoded = [build_standard_input(u, toy_tokenizer, 48) for u in small_dataset.units[:3]]
        with torch.no_grad():
            lower_only, _ = base.backbone.encode(encoded, layer_adapters=base.layer_hooks())
        stacked = stack_adapters(base, AdapterConfig("upper", reduction_factor=4), seed=3)
        with torch.no_grad():
            both, _ = stacked.backbone.encode(encoded, layer_adapters=stacked.layer_hooks())
        assert torch.equal(both, lower_only)

    def test_stacked_assembly_doubles_adapter_parameters(self, toy_tokenizer):
        base = tiny_assembly(toy_tokenizer, adapters=1)
        single = count_parameters(base).by_component["adapter:a0"]
        stacked = stack_adapters(base, AdapterConfig("upper", reduction_factor=4))
        report = count_parameters(stacked)
        in_adapters = sum(
            v for k, v in report.by_component.items() if k.startswith("adapter:")
        )
        assert in_adapters == 2 * single

    def test_name_clash_rejected(self, toy_tokenizer):
        base = tiny_assembly(toy_tokenizer, adapters=1)
        with pytest.raises(ValueError, match="already used"):
            stack_adapters(base, AdapterConfig("a0", reduction_factor=4))

    def test_requires_existing_adapters(self, toy_tokenizer):
        base = tiny_assembly(toy_tokenizer, adapters=0)
        with pytest.raises(ValueError, match="no adapters"):
            stack_adapters(base, AdapterConfig("upper", reduction_factor=4))


class TestCountParameters:
    def test_closed_form_adapter_count(self, toy_tokenizer):
        hidden, r, layers = 16, 4, 2
        assembly = tiny_assembly(toy_tokenizer)
        bottleneck = hidden // r
        per_layer = (hidden * bottleneck + bottleneck) + (bottleneck * hidden + hidden)
        assert count_parameters(assembly).by_component["adapter:a0"] == per_layer * layers

    def test_trainable_equals_total_without_adapters(self, toy_tokenizer):
        report = count_parameters(tiny_assembly(toy_tokenizer, adapters=0))
        assert report.trainable == report.total

    def test_serialized_bytes_are_four_per_trainable(self, toy_tokenizer):
        report = count_parameters(tiny_assembly(toy_tokenizer))
        assert report.serialized_bytes_fp32 == 4 * report.trainable

    def test_component_sum_matches_total(self, toy_tokenizer, naive):
        report = count_parameters(tiny_assembly(toy_tokenizer, pvp=naive, head="pet"))
        assert sum(report.by_component.values()) == report.total


class TestSerialization:
    def build_inputs(self, tokenizer, dataset):
        builder = make_input_builder("adapter", tokenizer, 48)
        return [builder(u) for u in dataset.units[:6]]

    def test_round_trip_restores_predictions_bitwise(self, toy_tokenizer, small_dataset, tmp_path):
        assembly = tiny_assembly(toy_tokenizer, seed=4)
        with torch.no_grad():  # make trainables non-trivial
            for name, p in assembly.named_parameters():
                if p.requires_grad:
                    p.add_(torch.randn(p.shape, generator=torch.Generator().manual_seed(8)) * 0.05)
        inputs = self.build_inputs(toy_tokenizer, small_dataset)
        with torch.no_grad():
            before = assembly(inputs)
        path = tmp_path / "ckpt.pt"
        serialize_trainable(assembly, path)

        rebuilt = tiny_assembly(toy_tokenizer, seed=4)
        deserialize_trainable(path, rebuilt)
        with torch.no_grad():
            after = rebuilt(inputs)
        assert torch.equal(before, after)

    def test_frozen_backbone_excluded(self, toy_tokenizer, tmp_path):
        assembly = tiny_assembly(toy_tokenizer)
        path = tmp_path / "ckpt.pt"
        serialize_trainable(assembly, path)
        payload = torch.load(path, weights_only=True)
        assert all(not name.startswith("backbone.") for name in payload["tensors"])
        report = count_parameters(assembly)
        assert sum(t.numel() for t in payload["tensors"].values()) == report.trainable

    def test_shape_mismatch_names_tensor(self, toy_tokenizer, tmp_path):
        assembly = tiny_assembly(toy_tokenizer)
        path = tmp_path / "ckpt.pt"
        serialize_trainable(assembly, path)
        backbone = MiniBackbone(
            vocab_size=toy_tokenizer.vocab_size, hidden_size=32, layer_count=2,
            num_heads=2, pad_id=toy_tokenizer.pad_id,
        )
        other = assemble(backbone, (AdapterConfig("a0", reduction_factor=4),), "standard")
        with pytest.raises(ValueError, match="adapters.0"):
            deserialize_trainable(path, other)

    def test_missing_tensor_rejected(self, toy_tokenizer, tmp_path):
        assembly = tiny_assembly(toy_tokenizer)
        path = tmp_path / "ckpt.pt"
        serialize_trainable(assembly, path)
        payload = torch.load(path, weights_only=True)
        payload["manifest"] = payload["manifest"][:-1]
        del payload["tensors"][list(payload["tensors"])[-1]]
        torch.save(payload, path)
        with pytest.raises(ValueError, match="lacks"):
            deserialize_trainable(path, tiny_assembly(toy_tokenizer))
