import pathlib
import tempfile
import unittest

from kettle import (
    attestation,
    channels,
    confidential,
    errors,
    orchestrator,
    provenance,
    verifier,
)
from tests import (
    DEPENDENCY_BLOB,
    REF,
    REPOSITORY,
    SOURCE_FILE,
    assert_is_not_none,
    fixed_keys,
    frozen_clock,
    make_project,
)

BOOT_CHAIN = attestation.reference_boot_chain('0.4.0')
POLICY = verifier.AllowListPolicy(
    allowlist=(
        verifier.AllowListEntry(
            measurement=attestation.measure_boot_chain(BOOT_CHAIN),
            kettle_version='0.4.0',
            platform_id=attestation.PlatformId.SIM,
        ),
    )
)


class MessageTests(unittest.TestCase):
    def test_wire_names(self) -> None:
        nonce_p = bytes(range(32))
        payload = confidential.encode_message(
            confidential.PreAttestRequest(nonce_p=nonce_p)
        )
        self.assertIn(b'"nonce_p_hex":"000102', payload)
        self.assertEqual(
            confidential.PreAttestRequest(nonce_p=nonce_p),
            confidential.decode_message(payload),
        )

    def test_malformed_payloads(self) -> None:
        for payload in (b'', b'{}', b'{"kind":"nope"}', b'[1]'):
            with self.assertRaises(errors.ProtocolError, msg=repr(payload)):
                confidential.decode_message(payload)

    def test_expect_message(self) -> None:
        payload = confidential.encode_message(
            confidential.Failure(message='boom')
        )
        with self.assertRaises(errors.ConfidentialError) as context:
            confidential.expect_message(payload, confidential.PreAttestation)
        self.assertIn('boom', str(context.exception))

        payload = confidential.encode_message(
            confidential.PreAttestRequest(nonce_p=bytes(32))
        )
        with self.assertRaises(errors.ProtocolError) as context:
            confidential.expect_message(payload, confidential.BuildResult)
        self.assertEqual('build-result', context.exception.expected)
        self.assertEqual('preattest-request', context.exception.actual)


class PreAttestationTests(unittest.TestCase):
    def setUp(self) -> None:
        super().setUp()
        self.keys = fixed_keys()
        self.store = self.keys.trust_store()
        self.nonce_p = confidential.client_begin()

    def _preattest(
        self, boot_chain: tuple[attestation.BootComponent, ...] = BOOT_CHAIN
    ) -> tuple[confidential.CvmActor, confidential.PreAttestation]:
        return confidential.cvm_preattest(
            self.keys.platform(), boot_chain, self.nonce_p
        )

    def _check(
        self, pa: confidential.PreAttestation
    ) -> confidential.PreAttestationCheck:
        return confidential.client_verify_preattestation(
            pa, self.nonce_p, POLICY, self.store
        )

    def assertRejected(  # noqa: N802
        self,
        reason: confidential.PreAttestationFailure,
        check: confidential.PreAttestationCheck,
    ) -> None:
        self.assertFalse(check)
        self.assertIs(reason, check.reason)

    def test_genuine_preattestation(self) -> None:
        _, pa = self._preattest()
        report = pa.report
        self.assertEqual(self.nonce_p, report.host_data)
        self.assertEqual(
            confidential.channel_binding(pa.channel_public_key, self.nonce_p),
            report.report_data,
        )
        self.assertEqual(bytes(32), report.report_data[32:])
        check = self._check(pa)
        self.assertTrue(check)
        self.assertIsNone(check.reason)

    def test_fresh_channel_key_per_preattestation(self) -> None:
        _, first = self._preattest()
        _, second = self._preattest()
        self.assertNotEqual(
            first.channel_public_key, second.channel_public_key
        )
        self.assertNotEqual(
            confidential.client_begin(), confidential.client_begin()
        )

    def test_launch_nonces_never_repeat(self) -> None:
        nonces = [confidential.client_begin() for _ in range(1000)]
        self.assertEqual(1000, len(set(nonces)))
        self.assertTrue(all(len(nonce) == 32 for nonce in nonces))

    def test_malformed_report(self) -> None:
        _, pa = self._preattest()
        truncated = pa.model_copy(
            update={'report_bytes': pa.report_bytes[:-1]}
        )
        self.assertRejected(
            confidential.PreAttestationFailure.MALFORMED_REPORT,
            self._check(truncated),
        )

    def test_unknown_root(self) -> None:
        _, pa = self._preattest()
        self.store = attestation.platform_keygen().trust_store()
        with self.assertLogs('kettle.confidential', 'WARNING'):
            check = self._check(pa)
        self.assertRejected(
            confidential.PreAttestationFailure.UNKNOWN_ROOT, check
        )

    def test_measurement_not_allowed(self) -> None:
        _, pa = self._preattest(attestation.reference_boot_chain('0.3.9'))
        self.assertRejected(
            confidential.PreAttestationFailure.MEASUREMENT_NOT_ALLOWED,
            self._check(pa),
        )

    def test_platform_not_allowed(self) -> None:
        keys = attestation.platform_keygen(
            platform_id=attestation.PlatformId.TDX
        )
        self.store = keys.trust_store()
        _, pa = confidential.cvm_preattest(
            keys.platform(), BOOT_CHAIN, self.nonce_p
        )
        check = self._check(pa)
        self.assertRejected(
            confidential.PreAttestationFailure.MEASUREMENT_NOT_ALLOWED, check
        )
        self.assertIn('platform 2', check.detail)

    def test_stale_cvm(self) -> None:
        _, pa = self._preattest()
        self.nonce_p = confidential.client_begin()
        stale = pa.model_copy(update={'nonce_p': self.nonce_p})
        self.assertRejected(
            confidential.PreAttestationFailure.STALE_OR_SHARED_CVM,
            self._check(stale),
        )

    def test_substituted_channel_key(self) -> None:
        _, pa = self._preattest()
        _, other = self._preattest()
        substituted = pa.model_copy(
            update={'channel_public_key': other.channel_public_key}
        )
        self.assertRejected(
            confidential.PreAttestationFailure.CHANNEL_BINDING_MISMATCH,
            self._check(substituted),
        )


class SealingTests(unittest.TestCase):
    def setUp(self) -> None:
        super().setUp()
        keys = fixed_keys()
        self.nonce_p = confidential.client_begin()
        self.actor, self.pa = confidential.cvm_preattest(
            keys.platform(), BOOT_CHAIN, self.nonce_p
        )
        self.check = confidential.client_verify_preattestation(
            self.pa, self.nonce_p, POLICY, keys.trust_store()
        )
        self.channel_key = assert_is_not_none(self.actor._channel_key)

    def test_round_trip(self) -> None:
        sealed = confidential.seal_source(
            b'source archive', self.pa, self.nonce_p, check=self.check
        )
        self.assertNotIn(b'source archive', sealed.ciphertext)
        self.assertEqual(
            confidential.SEAL_CONTEXT + self.nonce_p, sealed.aad
        )
        self.assertEqual(
            b'source archive', confidential.unseal(sealed, self.channel_key)
        )

    def test_seal_requires_a_passing_check(self) -> None:
        failed = self.check.model_copy(update={'passed': False})
        other_key = self.check.model_copy(
            update={'channel_public_key': bytes(32)}
        )
        for check in (None, failed, other_key):
            with self.assertRaises(errors.PreAttestationNotVerifiedError):
                confidential.seal_source(
                    b'source', self.pa, self.nonce_p, check=check
                )
        with self.assertRaises(errors.PreAttestationNotVerifiedError):
            confidential.seal_source(
                b'source', self.pa, bytes(32), check=self.check
            )

    def test_tampered_ciphertext(self) -> None:
        sealed = confidential.seal_source(
            b'source archive', self.pa, self.nonce_p, check=self.check
        )
        flipped = bytes([sealed.ciphertext[0] ^ 1]) + sealed.ciphertext[1:]
        for tampered in (
            sealed.model_copy(update={'ciphertext': flipped}),
            sealed.model_copy(update={'aad': sealed.aad + b'x'}),
            sealed.model_copy(update={'aead_nonce': bytes(12)}),
        ):
            with self.assertRaises(errors.UnsealError):
                confidential.unseal(tampered, self.channel_key)

    def test_wrong_channel_key(self) -> None:
        sealed = confidential.seal_source(
            b'source archive', self.pa, self.nonce_p, check=self.check
        )
        other, _ = confidential.cvm_preattest(
            fixed_keys().platform(), BOOT_CHAIN, self.nonce_p
        )
        with self.assertRaises(errors.UnsealError):
            confidential.unseal(
                sealed, assert_is_not_none(other._channel_key)
            )


class CvmActorTests(unittest.IsolatedAsyncioTestCase):
    def setUp(self) -> None:
        super().setUp()
        cvm = fixed_keys().platform().launch(BOOT_CHAIN)
        self.actor = confidential.CvmActor(cvm, clock=frozen_clock)

    async def _handle(
        self, message: confidential.Message
    ) -> confidential.Message:
        return confidential.decode_message(
            await self.actor.handle(confidential.encode_message(message))
        )

    async def test_sealed_source_before_preattestation(self) -> None:
        sealed = confidential.SealedSource(
            ephemeral_public_key=bytes(32),
            aead_nonce=bytes(12),
            ciphertext=b'',
            aad=b'',
        )
        with self.assertLogs('kettle.confidential', 'WARNING'):
            response = await self._handle(
                confidential.SealedSourceMessage(sealed=sealed)
            )
        self.assertIsInstance(response, confidential.Failure)

    async def test_unexpected_request(self) -> None:
        with self.assertLogs('kettle.confidential', 'WARNING'):
            response = await self._handle(
                confidential.Failure(message='hello')
            )
        assert isinstance(response, confidential.Failure)
        self.assertIn('failure', response.message)

    async def test_undecodable_request(self) -> None:
        with self.assertLogs('kettle.confidential', 'WARNING'):
            response = confidential.decode_message(
                await self.actor.handle(b'not json')
            )
        self.assertIsInstance(response, confidential.Failure)


class SessionTests(unittest.IsolatedAsyncioTestCase):
    def setUp(self) -> None:
        super().setUp()
        tmp = tempfile.TemporaryDirectory()
        self.addCleanup(tmp.cleanup)
        self.project = make_project(pathlib.Path(tmp.name))
        self.keys = fixed_keys()
        self.requester = confidential.Requester(
            self.project.lock,
            self.project.config,
            self.project.source_dir,
            policy=POLICY,
            store=self.keys.trust_store(),
        )

    def _host(
        self,
        tamper: confidential.Tamper | None = None,
        transport_factory: channels.TransportFactory = (
            channels.InProcessTransport
        ),
    ) -> confidential.HostActor:
        return confidential.HostActor(
            self.keys.platform(),
            BOOT_CHAIN,
            transport_factory=transport_factory,
            tamper=tamper,
            clock=frozen_clock,
        )

    def assertBundleVerifies(  # noqa: N802
        self, bundle: orchestrator.EvidenceBundle
    ) -> None:
        policy = verifier.VerificationPolicy(
            allowlist=POLICY.allowlist,
            expected_external_parameters=provenance.ExternalParameters(
                repository=REPOSITORY, ref=REF
            ),
            expected_nonce=self.requester.build_nonce,
        )
        outcome = verifier.verify_bundle(
            bundle, policy, self.keys.trust_store()
        )
        self.assertTrue(outcome, outcome.model_dump_json())

    async def test_session_in_process(self) -> None:
        result = await confidential.confidential_build_session(
            self.requester, self._host()
        )
        transcript = result.transcript
        self.assertTrue(transcript.measurements_match)
        self.assertEqual(0, transcript.plaintext_source_bytes())
        self.assertEqual(
            [
                ('requester->cvm', 'preattest-request', False),
                ('cvm->requester', 'preattestation', False),
                ('requester->cvm', 'sealed-source', True),
                ('cvm->requester', 'build-result', False),
            ],
            [
                (o.direction.value, o.kind, o.opaque)
                for o in transcript.host_observed
            ],
        )
        self.assertBundleVerifies(result.bundle)
        self.assertEqual(
            ['out/app', 'out/notes.txt'],
            [a.name for a in result.bundle.artifacts],
        )
        self.assertEqual(
            SOURCE_FILE + DEPENDENCY_BLOB, result.bundle.artifacts[0].content
        )

    async def test_session_over_sockets(self) -> None:
        result = await confidential.confidential_build_session(
            self.requester,
            self._host(transport_factory=channels.SocketTransport),
        )
        self.assertTrue(result.transcript.measurements_match)
        self.assertEqual(0, result.transcript.plaintext_source_bytes())
        self.assertBundleVerifies(result.bundle)

    async def test_build_nonce_differs_from_launch_nonce(self) -> None:
        result = await confidential.confidential_build_session(
            self.requester, self._host()
        )
        pa = assert_is_not_none(result.transcript.pre_attestation)
        self.assertNotEqual(self.requester.build_nonce, pa.nonce_p)
        self.assertEqual(
            self.requester.build_nonce,
            assert_is_not_none(result.transcript.build_report).report_data[
                32:
            ],
        )

    async def test_tampering_host_aborts_before_disclosure(self) -> None:
        expectations = {
            confidential.Tamper.MODIFIED_KETTLE: 'MeasurementNotAllowed',
            confidential.Tamper.REPLAYED_CVM: 'StaleOrSharedCvm',
            confidential.Tamper.SUBSTITUTED_KEY: 'ChannelBindingMismatch',
            confidential.Tamper.UNKNOWN_ROOT: 'UnknownRoot',
        }
        for tamper, reason in expectations.items():
            with self.subTest(tamper=tamper):
                host = self._host(tamper)
                with self.assertRaises(
                    errors.AbortedBeforeDisclosureError
                ) as context:
                    await confidential.confidential_build_session(
                        self.requester, host
                    )
                self.assertEqual(reason, context.exception.reason)
                transcript = context.exception.transcript
                assert isinstance(transcript, confidential.SessionTranscript)
                self.assertEqual(0, transcript.plaintext_source_bytes())
                self.assertIsNone(transcript.build_report)
                self.assertFalse(transcript.measurements_match)
                self.assertNotIn(
                    'sealed-source',
                    [o.kind for o in host.observations],
                )

    async def test_host_is_closed_after_session(self) -> None:
        host = self._host(transport_factory=channels.SocketTransport)
        await confidential.confidential_build_session(self.requester, host)
        self.assertIsNone(host._transport)

        host = self._host(confidential.Tamper.UNKNOWN_ROOT)
        with self.assertRaises(errors.AbortedBeforeDisclosureError):
            await confidential.confidential_build_session(self.requester, host)
        self.assertIsNone(host._transport)

    async def test_host_sees_unsealed_source(self) -> None:
        leaked = confidential.SealedSource(
            ephemeral_public_key=bytes(32),
            aead_nonce=bytes(12),
            ciphertext=self.requester.source_archive(),
            aad=b'',
        )
        host = self._host()
        with self.assertRaises(errors.ProtocolError):
            await host.relay(
                confidential.encode_message(
                    confidential.SealedSourceMessage(sealed=leaked)
                )
            )
        (observation,) = host.observations
        self.assertFalse(observation.opaque)
        self.assertEqual(
            len(SOURCE_FILE) + len(DEPENDENCY_BLOB),
            observation.plaintext_source_bytes,
        )

    async def test_missing_dependency_blob(self) -> None:
        (self.project.source_dir / 'vendor' / 'serde.crate').unlink()
        requester = confidential.Requester(
            self.project.lock,
            self.project.config,
            self.project.source_dir,
            policy=POLICY,
            store=self.keys.trust_store(),
        )
        with self.assertRaises(errors.MissingBlobError):
            await confidential.confidential_build_session(
                requester, self._host()
            )
