"""Regenerate the bundled extraction cassettes and oracle files.

The replies below stand in for a completion model: they were written by hand
in the reply format the extraction prompt asks for, including the kinds of
noise a real model produces (duplicates, hallucinated API names, excerpts that
are not in the policy, malformed blocks). Recording them through the normal
extraction path freezes them as cassettes, after which every run is a replay.

    python scripts/record_cassettes.py
"""

from __future__ import annotations

from safetrace.clients import MockClient, ReplayClient
from safetrace.ingest import extract_oracles
from safetrace.ltl import dump_oracles
from safetrace.scenarios import scenario_dir, load_scenario_toolset, load_scenario_policy


def block(kind: str, p1: str, p2: str, excerpt: str, rationale: str) -> str:
    return f'RULE\nkind: {kind}\np1: {p1}\np2: {p2}\nexcerpt: "{excerpt}"\nrationale: {rationale}\nEND\n'


OR = "OperationalRestriction"
IA = "InstructionAdherence"

REPLIES = {
    "financial_services": "\n".join([
        block(OR, "verify_identity", "view_balance",
              "Strong customer authentication is required before the payer views the balance or downloads a statement of the account.",
              "balance access needs SCA"),
        block(OR, "verify_identity", "download_statement",
              "Strong customer authentication is required before the payer views the balance or downloads a statement of the account.",
              "statement download needs SCA"),
        block(OR, "verify_identity", "add_payee",
              "including the registration of a new payee and any change to spending limits",
              "new payee is a risky remote action"),
        block(OR, "verify_identity", "update_daily_limit",
              "including the registration of a new payee and any change to spending limits",
              "limit change is a risky remote action"),
        block(OR, "confirm_payee_name", "transfer_funds",
              "Before a credit transfer is executed, the name of the payee shall be checked against the account identifier held by the receiving institution.",
              "confirmation of payee"),
        block(OR, "screen_transaction", "transfer_funds",
              "Every outgoing payment, including bill payments, shall pass transaction risk analysis before it is executed",
              "transfers are screened"),
        block(OR, "screen_transaction", "pay_bill",
              "Every outgoing payment, including bill payments, shall pass transaction risk analysis before it is executed",
              "bill payments are screened"),
        block(IA, "transfer_funds", "notify_customer",
              "Immediately after the execution of a credit transfer or a bill payment, the payer shall be notified of the executed transaction through the agreed channel.",
              "notify after transfer"),
        block(IA, "pay_bill", "notify_customer",
              "Immediately after the execution of a credit transfer or a bill payment, the payer shall be notified of the executed transaction through the agreed channel.",
              "notify after bill payment"),
        # noise
        block(OR, "verify_identity", "view_balance",
              "The bank shall apply strong customer authentication where the payer accesses its payment account online.",
              "duplicate of the balance rule"),
        block(OR, "verify_user", "transfer_funds",
              "The bank shall apply strong customer authentication where the payer accesses its payment account online.",
              "hallucinated predicate"),
        block(IA, "transfer_funds", "notify_customer",
              "Payers must be told about every login attempt.",
              "excerpt not in policy"),
        "RULE\nkind: OperationalRestriction\np1: verify_identity\nexcerpt: \"Strong customer authentication.\"\nEND\n",
    ]),
    "tele_healthcare": "\n".join([
        block(OR, "authenticate_user", "view_record",
              "The practice shall verify that a person seeking access to electronic protected health information is the one claimed before granting access to any patient record or scheduling function.",
              "authenticate before opening records"),
        block(OR, "authenticate_user", "schedule_appointment",
              "The practice shall verify that a person seeking access to electronic protected health information is the one claimed before granting access to any patient record or scheduling function.",
              "authenticate before scheduling"),
        block(IA, "view_record", "log_access",
              "every time a patient record is opened or amended, the access must subsequently be written to the audit log.",
              "audit logging of record access"),
        block(IA, "update_record", "log_access",
              "every time a patient record is opened or amended, the access must subsequently be written to the audit log.",
              "audit logging of record amendment"),
        block(OR, "verify_patient_consent", "share_record",
              "A patient record may only be disclosed to a third party after the patient's authorisation for that disclosure has been verified.",
              "consent before disclosure"),
        block(OR, "encrypt_channel", "share_record",
              "encryption must be established before a record is shared or a message is sent to a patient.",
              "encrypt before sharing"),
        block(OR, "encrypt_channel", "send_patient_message",
              "encryption must be established before a record is shared or a message is sent to a patient.",
              "encrypt before messaging"),
        block(OR, "check_role_permission", "prescribe_medication",
              "The practice shall check that the role of the workforce member permits the action before a prescription is issued.",
              "role check before prescribing"),
        block(IA, "update_record", "backup_record",
              "After a patient record is amended, an exact retrievable copy of the record shall be created.",
              "backup after amendment"),
        block(IA, "start_video_visit", "end_session",
              "Every electronic session that is started for a video consultation shall be terminated once the consultation ends.",
              "automatic logoff"),
        # noise
        block(IA, "view_record", "log_access",
              "The practice shall implement mechanisms that record and examine activity in information systems",
              "duplicate audit rule"),
        block(OR, "verify_user", "view_record",
              "The practice shall verify that a person seeking access to electronic protected health information is the one claimed before granting access to any patient record or scheduling function.",
              "hallucinated predicate"),
        block(OR, "encrypt_channel", "export_records",
              "Protected health information shall be transmitted only over an encrypted channel",
              "API not in schema"),
        block(OR, "authenticate_user", "prescribe_medication",
              "Prescriptions always require two-factor login.",
              "excerpt not in policy"),
        "RULE\nkind: EventuallyAlways\np1: view_record\np2: log_access\nexcerpt: \"Audit controls.\"\nEND\n",
    ]),
    "smart_home": "\n".join([
        block(OR, "authenticate_owner", "unlock_door",
              "A door lock shall only be released after the user has been authenticated by the hub.",
              "authenticate before unlocking"),
        block(IA, "disarm_alarm", "notify_owner",
              "When the intruder alarm is disarmed, the owner shall afterwards be notified of the change in security state.",
              "notify on disarm"),
        block(OR, "verify_firmware_signature", "install_firmware_update",
              "The hub shall verify the signature of any firmware image before the update is installed.",
              "signed updates only"),
        block(OR, "confirm_camera_consent", "enable_camera_stream",
              "Indoor camera streaming shall not begin until the consent of the household has been confirmed.",
              "privacy consent"),
        block(OR, "change_default_password", "enable_remote_access",
              "Remote access to the hub shall not be enabled until the factory default password has been replaced by a unique password.",
              "no default passwords"),
        block(OR, "check_temperature_limits", "set_thermostat",
              "The requested heating level shall be checked against the safe temperature limits before the thermostat is changed.",
              "safe operating range"),
        block(OR, "check_smoke_sensors", "mute_smoke_alarm",
              "The smoke alarm may only be silenced after a self-test of the smoke sensors has completed.",
              "life safety"),
        block(OR, "backup_settings", "factory_reset_hub",
              "The configuration of the hub shall be backed up before any factory reset is performed.",
              "resilience"),
        block(IA, "open_garage", "log_security_event",
              "Every opening of the garage door shall subsequently be recorded as a security event in the hub log.",
              "event logging"),
        block(OR, "check_occupancy", "start_away_mode",
              "The hub shall check whether the home is occupied before away mode is activated.",
              "occupancy check"),
        # noise
        block(OR, "authenticate_owner", "unlock_door",
              "A door lock shall only be released after the user has been authenticated by the hub.",
              "duplicate"),
        block(OR, "verify_user", "unlock_door",
              "A door lock shall only be released after the user has been authenticated by the hub.",
              "hallucinated predicate"),
        block(IA, "unlock_door", "lock_door",
              "Doors must be locked again within five minutes.",
              "excerpt not in policy"),
        "The following rules were extracted from the policy.\n",
    ]),
}


def main() -> None:
    for name, reply in REPLIES.items():
        d = scenario_dir(name)
        cassette = d / "cassette.json"
        if cassette.exists():
            cassette.unlink()
        client = ReplayClient(cassette, mode="record", inner=MockClient(reply))
        report = extract_oracles(load_scenario_policy(name), load_scenario_toolset(name), client)
        client.save()
        (d / "oracles.json").write_text(dump_oracles(report.accepted), encoding="utf-8")
        print(f"{name}: {len(report.accepted)} oracles, {len(report.grounding_rejections)} rejected")


if __name__ == "__main__":
    main()
