from .guest import GuestDeviceState, GuestIoRequest, LightIovGuest, LocalIoError, guest_init
from .host import GuestInitError, LightIovHost, ProvisionError, VirtualController, VmResources

__all__ = [
    "GuestDeviceState", "GuestInitError", "GuestIoRequest", "LightIovGuest", "LightIovHost",
    "LocalIoError", "ProvisionError", "VirtualController", "VmResources", "guest_init",
]
