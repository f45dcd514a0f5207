"""
Serialization utilities and base classes.

Every persisted uscomp object (calibration, stiffness models, regression
parameters, atlases, configs, recording manifests) is a registered
``Serializable``. Objects serialize to plain dicts tagged with ``_type`` and are
written to disk as YAML with full float precision.
"""

import inspect
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Type, Union

import numpy as np
import yaml

from uscomp.exceptions import (
    ClassNotFoundError,
    DepthLimitError,
    DeserializationError,
    InvalidFieldError,
    UnknownFieldError,
    UscompError,
)

logger = logging.getLogger(__name__)


class SerializableRegistry:
    """Registry for serializable classes to facilitate class lookup and instantiation."""

    registry: Dict[str, type] = {}

    @classmethod
    def register_class(cls, class_name: str, class_ref: type):
        """Register a class for serialization purposes by adding it to the registry.

        Args:
            class_name: The name of the class to register.
            class_ref: A reference to the class being registered.

        Raises:
            ValueError: If a different class with the same name is already registered.
        """
        if class_name in cls.registry:
            existing_class = cls.registry[class_name]
            if existing_class is class_ref:
                return
            raise ValueError(
                f"Class name conflict: '{class_name}' is already registered as "
                f"<class '{existing_class.__module__}.{existing_class.__name__}'>. "
                f"Cannot register <class '{class_ref.__module__}.{class_ref.__name__}'>."
            )
        cls.registry[class_name] = class_ref

    @classmethod
    def get_class(cls, class_name: str):
        """Retrieve a class reference from the registry by its name.

        Returns:
            The class reference if found, None otherwise.
        """
        return cls.registry.get(class_name)


def _required_init_params(cls: type) -> List[str]:
    parameters = inspect.signature(cls.__init__).parameters.values()
    return [
        param.name
        for param in parameters
        if param.name != "self"
        and param.default == inspect.Parameter.empty
        and param.kind not in (inspect.Parameter.VAR_KEYWORD, inspect.Parameter.VAR_POSITIONAL)
    ]


def register_serializable(cls):
    """Decorator to register a class as serializable in the registry.

    The class must be constructible without arguments: every ``__init__``
    parameter needs a default, so that deserialization can create an empty
    instance and fill it from the stored fields.

    Raises:
        TypeError: If the class cannot be initialized without arguments.
        ValueError: If a different class with the same name is already registered.
    """
    required = _required_init_params(cls)
    if required:
        message = (
            f"Error: {cls.__name__} cannot be initialized without parameters "
            f"({', '.join(required)}). Serializable classes must support initialization "
            f"with no arguments."
        )
        logger.error(message)
        raise TypeError(message)
    SerializableRegistry.register_class(cls.__name__, cls)
    return cls


class Serializable:
    """A base class for objects that can be serialized and deserialized.

    Subclasses list numpy-valued attributes in ``array_fields``; they are written
    as nested lists and restored as ``float64`` arrays. ``validate`` runs after
    every deserialization so that loaded objects honor the same invariants as
    constructed ones.
    """

    array_fields: Tuple[str, ...] = ()

    def __init__(self) -> None:
        """Initialize a serializable object with no specific fields."""
        self.fields_to_serialize: List[str] = []

    def add_serializable_fields(self, fields: List[str]) -> None:
        """Add field names to the list that should be included in serialization.

        Raises:
            InvalidFieldError: If any provided field is not a string.
        """
        if not all(isinstance(field, str) for field in fields):
            raise InvalidFieldError(field_name="multiple", reason="All fields must be strings")
        # dict.fromkeys keeps declaration order so dumps are stable across processes
        self.fields_to_serialize = list(dict.fromkeys(self.fields_to_serialize + list(fields)))

    def validate(self) -> None:
        """Check invariants; subclasses raise ``ValidationError`` on violation."""

    def serialize(self, max_depth: int = 100, _current_depth: int = 0) -> Dict[str, Any]:
        """Serialize the object to a dictionary of plain Python values.

        Args:
            max_depth: Maximum nesting depth (default: 100).
            _current_depth: Current depth (used internally, do not set).

        Returns:
            Dictionary containing ``_type`` and all serializable fields.

        Raises:
            DepthLimitError: If nesting depth exceeds max_depth.
        """
        if _current_depth >= max_depth:
            raise DepthLimitError(max_depth=max_depth, current_depth=_current_depth)

        data: Dict[str, Any] = {"_type": type(self).__name__}
        for field in self.fields_to_serialize:
            value = getattr(self, field, None)
            data[field] = _serialize_value(value, max_depth, _current_depth)
        return data

    def deserialize(self, data: Dict[str, Any], strict: bool = False) -> None:
        """Deserialize the object from a dictionary, restoring its state.

        Args:
            data: Dictionary produced by ``serialize``.
            strict: If True, raise error for unknown fields. If False, ignore them.

        Raises:
            UnknownFieldError: If strict and a key is not a declared field.
            DeserializationError: If a field cannot be restored.
        """
        for key, value in data.items():
            if key == "_type":
                continue
            if key not in self.fields_to_serialize:
                if strict:
                    raise UnknownFieldError(field_name=key, obj_type=type(self).__name__)
                logger.debug("Ignoring unknown field %r in %s", key, type(self).__name__)
                continue
            try:
                restored = Serializable.deserialize_item(value, strict=strict)
                if key in self.array_fields and restored is not None:
                    restored = np.asarray(restored, dtype=np.float64)
                setattr(self, key, restored)
            except UscompError:
                raise
            except Exception as e:
                raise DeserializationError(
                    message=f"Failed to deserialize field '{key}'",
                    obj_type=type(self).__name__,
                    field=key,
                ) from e
        self.validate()

    @staticmethod
    def deserialize_item(item: Any, strict: bool = False) -> Any:
        """Deserialize an item (dict, list, or primitive type).

        Returns:
            Deserialized item; dicts tagged with ``_type`` become registered objects.
        """
        if isinstance(item, dict):
            if "_type" in item:
                attr_class = SerializableRegistry.get_class(item["_type"])
                if attr_class is None:
                    raise ClassNotFoundError(item["_type"])
                obj = attr_class()
                obj.deserialize(item, strict=strict)
                return obj
            return {k: Serializable.deserialize_item(v, strict=strict) for k, v in item.items()}
        elif isinstance(item, list):
            return [Serializable.deserialize_item(sub_item, strict=strict) for sub_item in item]
        return item

    def to_yaml(self) -> str:
        """Render the object as a YAML document."""
        return yaml.safe_dump(self.serialize(), sort_keys=False, default_flow_style=None)

    @classmethod
    def from_dict(cls, data: Dict[str, Any], strict: bool = True):
        """Create an instance of ``cls`` from serialized data.

        Raises:
            DeserializationError: If ``data`` is tagged with a different type.
        """
        tag = data.get("_type", cls.__name__)
        if tag != cls.__name__:
            raise DeserializationError(
                f"Expected '{cls.__name__}' but found '{tag}'", obj_type=cls.__name__
            )
        obj = cls()
        obj.deserialize(data, strict=strict)
        return obj


def _serialize_value(value: Any, max_depth: int, _current_depth: int) -> Any:
    if isinstance(value, Serializable):
        return value.serialize(max_depth=max_depth, _current_depth=_current_depth + 1)
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, (list, tuple)):
        return [_serialize_value(item, max_depth, _current_depth) for item in value]
    if isinstance(value, dict):
        return {k: _serialize_value(v, max_depth, _current_depth) for k, v in value.items()}
    return value


def save_yaml(obj: Serializable, path: Union[str, Path]) -> Path:
    """Write a serializable object to ``path`` as YAML.

    Returns:
        The path written.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(obj.to_yaml(), encoding="utf-8")
    return path


def load_yaml(
    path: Union[str, Path], expected: Optional[Type[Serializable]] = None, strict: bool = True
) -> Any:
    """Read a serializable object from a YAML file.

    Args:
        path: File to read.
        expected: If given, the loaded object must be an instance of this class.
        strict: Reject unknown fields (default True).

    Raises:
        DeserializationError: If the file is not a tagged object or has the wrong type.
    """
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as e:
        raise DeserializationError(f"Malformed YAML in {path}") from e
    if not isinstance(data, dict) or "_type" not in data:
        raise DeserializationError(f"{path} does not hold a tagged object")
    obj = Serializable.deserialize_item(data, strict=strict)
    if expected is not None and not isinstance(obj, expected):
        raise DeserializationError(
            f"Expected '{expected.__name__}' in {path}", obj_type=type(obj).__name__
        )
    return obj
