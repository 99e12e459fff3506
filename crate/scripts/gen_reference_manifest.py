#!/usr/bin/env python3
"""Regenerates crates/core/data/reference_manifest.json.

Block counts follow the layout rules in crates/core/src/target/body.rs.
"""
import json
import pathlib

PARAM_BLOCKS = {"bool": 2, "i32": 4, "i64": 4, "f32": 3, "f64": 3, "str": 3, "blob": 3}


def param_blocks(p):
    if isinstance(p, dict):
        return 1 + sum(param_blocks(f) for f in p["composite"])
    return PARAM_BLOCKS[p]


def behavior_blocks(b):
    kind = b["kind"]
    if kind == "branch":
        return b["arms"]
    if kind == "gate":
        return len(b["prefix"])
    return {"echo": 0, "store": 2, "lookup": 2, "clear": 1}[kind]


def comp(*fields):
    return {"composite": list(fields)}


def m(name, params, entry=None, deep=None, behavior=None, fault=None):
    return dict(name=name, params=params, entry=entry, deep=deep,
                behavior=behavior or {"kind": "echo"}, fault=fault)


SERVICES = [
    ("window", "mfuz.server.wm.IWindowManager", [
        m("setOverscan", ["i32"] * 5, entry="perm.WRITE_SECURE_SETTINGS",
          fault={"class": "freeze", "trigger": {"kind": "abs_ge", "param": 0, "threshold": 4096}, "repeat": 8}),
        m("getRotation", []),
        m("setAnimationScale", ["i32", "f32"], entry="perm.SET_ANIMATION_SCALE"),
        m("freezeRotation", ["i32"], entry="perm.SET_ORIENTATION"),
        m("getDisplaySize", ["i32"]),
    ]),
    ("account", "mfuz.server.accounts.IAccountManager", [
        m("getSharedAccountsAsUser", ["i32"], entry="perm.INTERACT_ACROSS_USERS_FULL",
          fault={"class": "resource_exhaustion", "trigger": {"kind": "not_in", "param": 0, "values": [0, 10]}, "limit": 1024}),
        m("getAccounts", ["str"], entry="perm.GET_ACCOUNTS"),
        m("addAccount", ["str", "str"], entry="perm.AUTHENTICATE_ACCOUNTS", deep="perm.MANAGE_ACCOUNTS",
          behavior={"kind": "store"}),
        m("hasAccount", ["str"], behavior={"kind": "lookup"}),
        m("getAccountCount", []),
    ]),
    ("statusbar", "mfuz.server.statusbar.IStatusBarService", [
        m("setIcon", ["str", "i32"], entry="perm.STATUS_BAR",
          fault={"class": "collateral_crash", "trigger": {"kind": "int_mod", "param": 1, "modulus": 32, "remainder": 31}}),
        m("expandPanels", [], entry="perm.EXPAND_STATUS_BAR"),
        m("disable", ["i32"], entry="perm.STATUS_BAR_SERVICE"),
        m("setIconVisibility", ["str", "bool"], entry="perm.STATUS_BAR", deep="perm.STATUS_BAR_SERVICE"),
    ]),
    ("power", "mfuz.server.power.IPowerManager", [
        m("reboot", ["bool", "str"], entry="perm.REBOOT"),
        m("setBacklight", ["i32"], entry="perm.DEVICE_POWER"),
        m("isInteractive", []),
        m("acquireWakeLock", ["str", "i32"], entry="perm.WAKE_LOCK", behavior={"kind": "store"}),
        m("goToSleep", ["i64", "i32"], entry="perm.DEVICE_POWER"),
    ]),
    ("location", "mfuz.server.location.ILocationManager", [
        m("getLastLocation", ["str"], entry="perm.ACCESS_FINE_LOCATION"),
        m("setTestProvider", ["str", "bool"], entry="perm.ACCESS_MOCK_LOCATION", deep="perm.LOCATION_HARDWARE"),
        m("getProviders", ["bool"]),
        m("requestUpdates", ["str", "i64", "f32"], entry="perm.ACCESS_COARSE_LOCATION"),
        m("addGeofence", [comp("f64", "f64", "f32"), "str"], entry="perm.ACCESS_FINE_LOCATION"),
    ]),
    ("package", "mfuz.server.pm.IPackageManager", [
        m("setComponentEnabled", ["i32"], entry="perm.CHANGE_COMPONENT_ENABLED_STATE",
          fault={"class": "uncaught_exception", "trigger": {"kind": "int_mod", "param": 0, "modulus": 16, "remainder": 15}}),
        m("getInstalledPackages", ["i32"]),
        m("clearCache", ["str"], entry="perm.CLEAR_APP_CACHE"),
        m("grantPermission", ["str", "str"], entry="perm.GRANT_RUNTIME_PERMISSIONS", deep="perm.MANAGE_USERS"),
        m("getPackageUid", ["str", "i32"]),
    ]),
    ("clipboard", "mfuz.server.clipboard.IClipboard", [
        m("setPrimaryClip", ["str"], behavior={"kind": "store"}),
        m("getPrimaryClip", ["str"], behavior={"kind": "lookup"}),
        m("hasPrimaryClip", []),
        m("clearPrimaryClip", ["i32"], entry="perm.CLEAR_CLIPBOARD", behavior={"kind": "clear"}),
    ]),
    ("notification", "mfuz.server.notification.INotificationManager", [
        m("enqueueNotification", ["str", "i32", "str"], entry="perm.POST_NOTIFICATIONS"),
        m("cancelAll", ["str"], entry="perm.POST_NOTIFICATIONS"),
        m("setZenMode", ["i32"], entry="perm.MANAGE_NOTIFICATIONS", deep="perm.STATUS_BAR_SERVICE",
          behavior={"kind": "branch", "arms": 4}),
        m("areNotificationsEnabled", ["str"]),
        m("setListener", [comp("str", "i32"), "bool"], entry="perm.BIND_NOTIFICATION_LISTENER"),
    ]),
    ("audio", "mfuz.server.audio.IAudioService", [
        m("setStreamVolume", ["i32", "i32", "i32"], entry="perm.MODIFY_AUDIO_SETTINGS"),
        m("setMasterMute", ["bool", "i32"], entry="perm.MODIFY_AUDIO_ROUTING"),
        m("getStreamVolume", ["i32"]),
        m("setRingerMode", ["i32"], behavior={"kind": "branch", "arms": 4}),
        m("playSoundEffect", ["i32", "f32"]),
    ]),
    ("input", "mfuz.server.input.IInputManager", [
        m("injectInputEvent", [comp("i32", "i64", "f32", "f32"), "i32"], entry="perm.INJECT_EVENTS"),
        m("setPointerSpeed", ["i32"], entry="perm.SET_POINTER_SPEED"),
        m("getInputDevice", ["i32"]),
        m("tryPointerSpeed", ["i32"], entry="perm.SET_POINTER_SPEED"),
        m("setKeyboardLayout", [comp("str", "str"), "i32"], entry="perm.SET_KEYBOARD_LAYOUT"),
    ]),
    ("media", "mfuz.server.media.IMediaSessionManager", [
        m("forwardNativeBuffer", ["blob"], entry="perm.MEDIA_CONTENT_CONTROL",
          fault={"class": "parse_crash", "trigger": {"kind": "byte_eq", "param": 0, "offset": 0, "value": 127}}),
        m("getSessions", ["str"], entry="perm.MEDIA_CONTENT_CONTROL"),
        m("dispatchMediaKey", [comp("i32", "i32", "i64"), "bool"], entry="perm.MEDIA_CONTENT_CONTROL"),
        m("setVolumeController", ["blob"], entry="perm.STATUS_BAR_SERVICE"),
        m("isGlobalPriorityActive", []),
    ]),
    ("settings", "mfuz.server.content.ISettingsProvider", [
        m("putString", ["str", "str"], entry="perm.WRITE_SETTINGS", behavior={"kind": "store"}),
        m("getString", ["str"], behavior={"kind": "lookup"}),
        m("putSecureString", ["str", "str"], entry="perm.WRITE_SECURE_SETTINGS", deep="perm.INTERACT_ACROSS_USERS",
          behavior={"kind": "store"}),
        m("parseSyncConfig", ["str"], entry="perm.WRITE_SYNC_SETTINGS",
          fault={"class": "parse_crash", "trigger": {"kind": "byte_eq", "param": 0, "offset": 0, "value": 123}}),
        m("resetToDefaults", ["i32"], entry="perm.WRITE_SECURE_SETTINGS", behavior={"kind": "clear"}),
    ]),
    ("telephony", "mfuz.server.telephony.ITelephony", [
        m("getDeviceId", ["str"], entry="perm.READ_PHONE_STATE"),
        m("call", ["str", "str"], entry="perm.CALL_PHONE"),
        m("setDataEnabled", ["i32", "bool"], entry="perm.MODIFY_PHONE_STATE"),
        m("getCellLocation", [], entry="perm.ACCESS_FINE_LOCATION"),
        m("supplyPuk", ["i32"], behavior={"kind": "gate", "prefix": [0x4D, 0x46]}),
        m("getSignalStrength", ["i32", "i64"]),
    ]),
]


def build():
    services = []
    for name, iface, methods in SERVICES:
        out = []
        for txn, meth in enumerate(methods, start=1):
            blocks = 1 + sum(param_blocks(p) for p in meth["params"])
            blocks += behavior_blocks(meth["behavior"])
            blocks += 1 if meth["fault"] else 0
            blocks += 1
            spec = {"name": meth["name"], "txn_id": txn, "params": meth["params"], "block_count": blocks}
            if meth["behavior"]["kind"] != "echo":
                spec["behavior"] = meth["behavior"]
            perms = []
            if meth["entry"]:
                perms.append({"name": meth["entry"], "position": "entry"})
            if meth["deep"]:
                perms.append({"name": meth["deep"], "position": "deep"})
            if perms:
                spec["permissions"] = perms
            if meth["fault"]:
                spec["fault"] = meth["fault"]
            out.append(spec)
        services.append({"name": name, "interface": iface, "methods": out})
    return {
        "build": "mfuz-ref-1",
        "principals": [
            {"id": 0, "name": "untrusted_app", "permissions": []},
            {"id": 1000, "name": "system", "all_permissions": True},
        ],
        "services": services,
    }


def main():
    doc = build()
    methods = [mm for s in doc["services"] for mm in s["methods"]]
    checks = [c for mm in methods for c in mm.get("permissions", [])]
    perms = {c["name"] for c in checks}
    entry = sum(c["position"] == "entry" for c in checks)
    assert len(doc["services"]) >= 12 and len(methods) >= 60, (len(doc["services"]), len(methods))
    assert len(perms) >= 25, len(perms)
    assert entry / len(checks) >= 0.8, entry / len(checks)
    path = pathlib.Path(__file__).resolve().parent.parent / "crates/core/data/reference_manifest.json"
    path.write_text(json.dumps(doc, indent=2) + "\n")
    print(f"{len(doc['services'])} services, {len(methods)} apis, {len(perms)} permissions, "
          f"{entry}/{len(checks)} entry checks -> {path}")


if __name__ == "__main__":
    main()
